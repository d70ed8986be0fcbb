//! Procedural base imagery: smooth gradients, low-frequency texture and
//! random flat shapes, finished with a sensor-noise profile.
//!
//! Two noise profiles stand in for two cameras. The base profile is mostly
//! luminance noise (one draw shared by R, G and B); the donor profile draws
//! stronger independent noise per channel. A spliced region therefore differs
//! in noise statistics, and the per-channel difference is larger than the
//! difference in the channel sum.

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};

use super::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseProfile {
    /// Std of the noise shared across channels.
    pub luma_sigma: f32,
    /// Std of the independent per-channel noise.
    pub chroma_sigma: f32,
}

impl NoiseProfile {
    pub const BASE: NoiseProfile = NoiseProfile {
        luma_sigma: 0.01,
        chroma_sigma: 0.002,
    };
    pub const DONOR: NoiseProfile = NoiseProfile {
        luma_sigma: 0.0,
        chroma_sigma: 0.03,
    };
    pub const NONE: NoiseProfile = NoiseProfile {
        luma_sigma: 0.0,
        chroma_sigma: 0.0,
    };

    pub fn apply<R: Rng + ?Sized>(&self, img: &mut Image, rng: &mut R) {
        let n = img.height * img.width;
        if self.luma_sigma > 0.0 {
            let dist = Normal::new(0.0f32, self.luma_sigma).expect("finite sigma");
            for i in 0..n {
                let v = dist.sample(rng);
                for c in 0..3 {
                    img.data[c * n + i] += v;
                }
            }
        }
        if self.chroma_sigma > 0.0 {
            let dist = Normal::new(0.0f32, self.chroma_sigma).expect("finite sigma");
            for v in &mut img.data {
                *v += dist.sample(rng);
            }
        }
        img.clamp01();
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    // stay away from the clip limits so noise is not truncated
    [0, 1, 2].map(|_| rng.random_range(0.1f32..0.9))
}

/// Noise-free content: gradient background, sinusoidal texture and shapes.
pub fn scene<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Image {
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02f32..0.05),
                rng.random_range(-0.3f32..0.3),
                rng.random_range(-0.3f32..0.3),
                rng.random_range(0.0f32..std::f32::consts::TAU),
            )
        })
        .collect();
    let diag = ((height * height + width * width) as f32).sqrt().max(1.0);
    let mut img = Image::from_fn(height, width, |c, y, x| {
        let t = ((y as f32 - height as f32 / 2.0) * dy + (x as f32 - width as f32 / 2.0) * dx) / diag + 0.5;
        let tex: f32 = waves
            .iter()
            .map(|&(amp, fy, fx, ph)| amp * (fy * y as f32 + fx * x as f32 + ph).sin())
            .sum();
        c0[c] * (1.0 - t) + c1[c] * t + tex
    });

    let shapes = rng.random_range(2..=5);
    for _ in 0..shapes {
        let color = random_color(rng);
        let cy = rng.random_range(0.0..height as f32);
        let cx = rng.random_range(0.0..width as f32);
        let ry = rng.random_range(0.05..0.25) * height as f32;
        let rx = rng.random_range(0.05..0.25) * width as f32;
        let ellipse: bool = rng.random();
        for y in 0..height {
            for x in 0..width {
                let ny = (y as f32 - cy) / ry;
                let nx = (x as f32 - cx) / rx;
                let inside = if ellipse {
                    ny * ny + nx * nx <= 1.0
                } else {
                    ny.abs() <= 1.0 && nx.abs() <= 1.0
                };
                if inside {
                    for (c, v) in color.iter().enumerate() {
                        img.set(c, y, x, *v);
                    }
                }
            }
        }
    }
    img.clamp01();
    img
}

/// A full synthetic photograph: scene content plus the given sensor noise.
pub fn photograph<R: Rng + ?Sized>(height: usize, width: usize, noise: NoiseProfile, rng: &mut R) -> Image {
    let mut img = scene(height, width, rng);
    noise.apply(&mut img, rng);
    img
}
