//! Area (box-overlap) resampling for images, nearest-neighbor for masks.

use super::{Image, Mask};
use crate::error::{Error, Result};

/// Per output index, the source pixels it covers and their overlap weights.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let start = o as f64 * scale;
            let end = (o + 1) as f64 * scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(src);
            let mut taps = Vec::with_capacity(last - first);
            for i in first..last {
                let overlap = (end.min((i + 1) as f64) - start.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
            }
            taps
        })
        .collect()
}

fn check_target(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Resamples a single `h x w` plane by box-overlap averaging.
pub fn resize_plane(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let wy = area_weights(h, oh);
    let wx = area_weights(w, ow);
    // rows first, then columns
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for (ox, taps) in wx.iter().enumerate() {
            tmp[y * ow + ox] = taps.iter().map(|&(x, a)| a * f64::from(plane[y * w + x])).sum();
        }
    }
    let mut out = vec![0.0f32; oh * ow];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..ow {
            let v: f64 = taps.iter().map(|&(y, a)| a * tmp[y * ow + ox]).sum();
            out[oy * ow + ox] = v as f32;
        }
    }
    out
}

pub fn resize_image(img: &Image, height: usize, width: usize) -> Result<Image> {
    check_target(height, width)?;
    if (img.height, img.width) == (height, width) {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(3 * height * width);
    for c in 0..3 {
        data.extend(resize_plane(img.plane(c), img.height, img.width, height, width));
    }
    Ok(Image { height, width, data })
}

pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    check_target(height, width)?;
    let mut out = Mask::new(height, width);
    for y in 0..height {
        // sample at the centre of the destination cell
        let sy = ((y * mask.height * 2 + mask.height) / (2 * height)).min(mask.height - 1);
        for x in 0..width {
            let sx = ((x * mask.width * 2 + mask.width) / (2 * width)).min(mask.width - 1);
            out.set(y, x, mask.get(sy, sx));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(n: usize) -> Image {
        Image::from_fn(n, n, |_, y, x| ((y + x) % 2) as f32)
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::filled(8, 6, [0.3, 0.6, 0.9]);
        let r = resize_image(&img, 4, 3).unwrap();
        for c in 0..3 {
            for v in r.plane(c) {
                assert!((v - img.get(c, 0, 0)).abs() < 1e-6);
            }
        }
        let r = resize_image(&img, 5, 7).unwrap();
        assert!(r
            .data
            .iter()
            .zip([0.3f32, 0.6, 0.9].iter().flat_map(|v| std::iter::repeat_n(*v, 35)))
            .all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn checkerboard_halves_to_gray() {
        let r = resize_image(&checkerboard(4), 2, 2).unwrap();
        assert!(r.data.iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn fractional_overlap_weights_sum_to_one() {
        for (s, d) in [(5, 3), (7, 2), (3, 5), (64, 17)] {
            for taps in area_weights(s, d) {
                let total: f64 = taps.iter().map(|t| t.1).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_resize_stays_binary() {
        let mut m = Mask::new(7, 9);
        for i in 0..20 {
            m.set(i % 7, (i * 3) % 9, true);
        }
        for (h, w) in [(3, 4), (14, 18), (5, 5), (1, 1)] {
            assert!(resize_mask(&m, h, w).unwrap().is_binary());
        }
    }

    #[test]
    fn zero_target_rejected() {
        assert!(resize_image(&Image::new(4, 4), 0, 4).is_err());
        assert!(resize_mask(&Mask::new(4, 4), 4, 0).is_err());
    }
}
