//! Rasters, synthetic forgery generation, resizing, PNG and manifest I/O.

pub mod dataset;
pub mod forge;
pub mod io;
pub mod manifest;
pub mod procedural;
pub mod resize;

use forgeloc_autograd::{Scalar, Shape, Tensor};
use rand::{Rng, RngExt};

use crate::error::{Error, Result};

/// Planar RGB raster with values in `[0, 1]`: all red, then green, then blue.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for (c, &v) in rgb.iter().enumerate() {
            img.plane_mut(c).fill(v);
        }
        img
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image { height, width, data }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            Shape::new(1, 3, self.height, self.width),
            self.data.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect(),
        )
        .expect("planar layout matches shape")
    }

    /// Batch entry `index` of an `n x 3 x h x w` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let [n, c, h, w] = t.shape().0;
        if c != 3 || index >= n {
            return Err(Error::InvalidArgument(format!(
                "tensor {} has no RGB sample {index}",
                t.shape()
            )));
        }
        let s = t.sample(index);
        Ok(Image {
            height: h,
            width: w,
            data: s.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        })
    }
}

/// Binary raster, `1` marks tampered pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.data
                .iter()
                .map(|&v| if v != 0 { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask layout matches shape")
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ForgeryKind {
    Splice,
    CopyMove,
    Removal,
}

impl ForgeryKind {
    pub const ALL: [ForgeryKind; 3] = [ForgeryKind::Splice, ForgeryKind::CopyMove, ForgeryKind::Removal];

    pub fn as_str(self) -> &'static str {
        match self {
            ForgeryKind::Splice => "splice",
            ForgeryKind::CopyMove => "copy_move",
            ForgeryKind::Removal => "removal",
        }
    }
}

impl std::str::FromStr for ForgeryKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "splice" => Ok(ForgeryKind::Splice),
            "copy_move" => Ok(ForgeryKind::CopyMove),
            "removal" => Ok(ForgeryKind::Removal),
            other => Err(format!("unknown forgery kind `{other}`")),
        }
    }
}

impl std::fmt::Display for ForgeryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgerySample {
    pub image: Image,
    pub mask: Mask,
    pub kind: ForgeryKind,
}

/// Flip/rotation applied identically to an image and its mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Counter-clockwise quarter turns, 0..4. Only 0 or 2 for non-square rasters.
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Self {
        let turns = rng.random_range(0..4u8);
        Augmentation {
            flip_horizontal: rng.random(),
            flip_vertical: rng.random(),
            quarter_turns: if square { turns } else { turns & 2 },
        }
    }

    /// Source coordinate of destination pixel `(y, x)` for an `h x w` input.
    fn source(&self, h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
        let (oh, ow) = self.output_dims(h, w);
        let (mut y, mut x) = (y, x);
        if self.flip_vertical {
            y = oh - 1 - y;
        }
        if self.flip_horizontal {
            x = ow - 1 - x;
        }
        // undo rotations one quarter turn at a time
        let (mut ch, mut cw) = (oh, ow);
        for _ in 0..self.quarter_turns % 4 {
            // a CCW turn reads output (y, x) from source (x, ch - 1 - y)
            let (sy, sx) = (x, ch - 1 - y);
            y = sy;
            x = sx;
            std::mem::swap(&mut ch, &mut cw);
        }
        debug_assert!(y < h && x < w);
        (y, x)
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let (oh, ow) = self.output_dims(img.height, img.width);
        let mut out = Image::new(oh, ow);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(img.height, img.width, y, x);
                for c in 0..3 {
                    out.set(c, y, x, img.get(c, sy, sx));
                }
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let (oh, ow) = self.output_dims(mask.height, mask.width);
        let mut out = Mask::new(oh, ow);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(mask.height, mask.width, y, x);
                out.set(y, x, mask.get(sy, sx));
            }
        }
        out
    }

    pub fn apply(&self, sample: &ForgerySample) -> ForgerySample {
        ForgerySample {
            image: self.apply_image(&sample.image),
            mask: self.apply_mask(&sample.mask),
            kind: sample.kind,
        }
    }
}

/// Random flip/rotation of a sample, applied identically to image and mask.
pub fn augment<R: Rng + ?Sized>(sample: &ForgerySample, rng: &mut R) -> ForgerySample {
    let square = sample.image.height == sample.image.width;
    Augmentation::random(rng, square).apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |c, y, x| (c * 100 + y * 10 + x) as f32)
    }

    #[test]
    fn double_horizontal_flip_is_identity() {
        let img = numbered(4, 6);
        let a = Augmentation {
            flip_horizontal: true,
            ..Default::default()
        };
        assert_eq!(a.apply_image(&a.apply_image(&img)), img);
        assert_ne!(a.apply_image(&img), img);
    }

    #[test]
    fn four_quarter_turns_compose_to_identity() {
        let img = numbered(5, 5);
        let a = Augmentation {
            quarter_turns: 1,
            ..Default::default()
        };
        let mut cur = img.clone();
        for i in 0..4 {
            if i > 0 {
                assert_ne!(cur, img);
            }
            cur = a.apply_image(&cur);
        }
        assert_eq!(cur, img);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // [[0,1],[10,11]] turned CCW becomes [[1,11],[0,10]]
        let img = numbered(2, 2);
        let a = Augmentation {
            quarter_turns: 1,
            ..Default::default()
        };
        let r = a.apply_image(&img);
        assert_eq!(&r.plane(0), &[1.0, 11.0, 0.0, 10.0]);
    }

    #[test]
    fn rectangular_rotation_swaps_dims() {
        let img = numbered(2, 3);
        let a = Augmentation {
            quarter_turns: 1,
            ..Default::default()
        };
        let r = a.apply_image(&img);
        assert_eq!((r.height, r.width), (3, 2));
        let back = Augmentation {
            quarter_turns: 3,
            ..Default::default()
        }
        .apply_image(&r);
        assert_eq!(back, img);
    }

    #[test]
    fn mask_stays_binary_and_aligned() {
        let mut rng = crate::seed::rng_for(3, "aug");
        let mut mask = Mask::new(6, 6);
        mask.set(1, 2, true);
        let img = Image::from_fn(6, 6, |_, y, x| if y == 1 && x == 2 { 1.0 } else { 0.0 });
        let sample = ForgerySample {
            image: img,
            mask,
            kind: ForgeryKind::Splice,
        };
        for _ in 0..20 {
            let s = augment(&sample, &mut rng);
            assert!(s.mask.is_binary());
            assert_eq!(s.mask.count(), 1);
            for y in 0..6 {
                for x in 0..6 {
                    assert_eq!(s.mask.get(y, x), s.image.get(0, y, x) == 1.0);
                }
            }
        }
    }
}
