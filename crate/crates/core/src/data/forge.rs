//! Splice, copy-move and removal generators.
//!
//! Every generator is a pure function of its inputs and the RNG, so a sample
//! is reproducible from its seed alone.

use rand::{Rng, RngExt};

use super::procedural::{photograph, NoiseProfile};
use super::{ForgeryKind, ForgerySample, Image, Mask};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Exclusive bounds on the tampered fraction of any generated mask.
pub const MIN_FRACTION: f64 = 0.005;
pub const MAX_FRACTION: f64 = 0.5;
pub const MAX_ATTEMPTS: usize = 10;

fn fraction_ok(mask: &Mask) -> bool {
    let f = mask.fraction();
    f > MIN_FRACTION && f < MAX_FRACTION
}

fn ellipse_mask(h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Mask {
    let mut m = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let ny = (y as f64 + 0.5 - cy) / ry;
            let nx = (x as f64 + 0.5 - cx) / rx;
            m.set(y, x, ny * ny + nx * nx <= 1.0);
        }
    }
    m
}

fn polygon_mask(h: usize, w: usize, verts: &[(f64, f64)]) -> Mask {
    let mut m = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            // even-odd crossing test
            let mut inside = false;
            let mut j = verts.len() - 1;
            for i in 0..verts.len() {
                let (yi, xi) = verts[i];
                let (yj, xj) = verts[j];
                if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            m.set(y, x, inside);
        }
    }
    m
}

/// Random ellipse or star-shaped polygon covering roughly 2% to 35% of the frame.
pub fn random_region<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Mask {
    let (hf, wf) = (h as f64, w as f64);
    let target = rng.random_range(0.02..0.35);
    // mean radius giving `target` of the frame for a disc-like shape
    let r = (target * hf * wf / std::f64::consts::PI).sqrt();
    let aspect: f64 = rng.random_range(0.6..1.6);
    let (ry, rx) = (r * aspect.sqrt(), r / aspect.sqrt());
    let cy = rng.random_range(ry.min(hf / 2.0)..=(hf - ry).max(hf / 2.0));
    let cx = rng.random_range(rx.min(wf / 2.0)..=(wf - rx).max(wf / 2.0));
    if rng.random::<bool>() {
        ellipse_mask(h, w, cy, cx, ry, rx)
    } else {
        let n = rng.random_range(5..=8);
        let verts: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * (i as f64 + rng.random_range(-0.3..0.3)) / n as f64;
                let s = rng.random_range(0.7..1.25);
                (cy + s * ry * a.sin(), cx + s * rx * a.cos())
            })
            .collect();
        polygon_mask(h, w, &verts)
    }
}

/// Pastes a random region of `donor` onto `base`. Feathering blends the
/// one-pixel band just inside the region edge half-and-half.
pub fn generate_splice<R: Rng + ?Sized>(
    base: &Image,
    donor: &Image,
    feather: bool,
    rng: &mut R,
) -> Result<ForgerySample> {
    if (base.height, base.width) != (donor.height, donor.width) {
        return Err(Error::Generation(format!(
            "splice donor is {}x{}, base is {}x{}",
            donor.height, donor.width, base.height, base.width
        )));
    }
    let (h, w) = (base.height, base.width);
    for _ in 0..MAX_ATTEMPTS {
        let mask = random_region(h, w, rng);
        if !fraction_ok(&mask) {
            continue;
        }
        let mut image = base.clone();
        for y in 0..h {
            for x in 0..w {
                if !mask.get(y, x) {
                    continue;
                }
                let edge = feather
                    && [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        ny >= 0
                            && nx >= 0
                            && (ny as usize) < h
                            && (nx as usize) < w
                            && !mask.get(ny as usize, nx as usize)
                    });
                for c in 0..3 {
                    let d = donor.get(c, y, x);
                    let v = if edge { 0.5 * (d + base.get(c, y, x)) } else { d };
                    image.set(c, y, x, v);
                }
            }
        }
        return Ok(ForgerySample {
            image,
            mask,
            kind: ForgeryKind::Splice,
        });
    }
    Err(Error::Generation(format!(
        "no valid splice region after {MAX_ATTEMPTS} attempts"
    )))
}

/// Region shape shared by source and destination of a copy-move.
fn local_shape(bh: usize, bw: usize, ellipse: bool) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for y in 0..bh {
        for x in 0..bw {
            let ny = (y as f64 + 0.5 - bh as f64 / 2.0) / (bh as f64 / 2.0);
            let nx = (x as f64 + 0.5 - bw as f64 / 2.0) / (bw as f64 / 2.0);
            if !ellipse || ny * ny + nx * nx <= 1.0 {
                cells.push((y, x));
            }
        }
    }
    cells
}

/// Copies a rectangular or elliptical region to a non-overlapping spot of the same image.
pub fn generate_copy_move<R: Rng + ?Sized>(base: &Image, rng: &mut R) -> Result<ForgerySample> {
    let (h, w) = (base.height, base.width);
    for _ in 0..MAX_ATTEMPTS {
        let bh = rng.random_range((h / 6).max(2)..=(h / 3).max(2));
        let bw = rng.random_range((w / 6).max(2)..=(w / 3).max(2));
        if bh >= h || bw >= w {
            continue;
        }
        let cells = local_shape(bh, bw, rng.random());
        let sy = rng.random_range(0..=h - bh);
        let sx = rng.random_range(0..=w - bw);
        let dy = rng.random_range(0..=h - bh);
        let dx = rng.random_range(0..=w - bw);
        // bounding boxes must be disjoint, which also rules out a zero shift
        let overlap = sy < dy + bh && dy < sy + bh && sx < dx + bw && dx < sx + bw;
        if overlap {
            continue;
        }
        let mut image = base.clone();
        let mut mask = Mask::new(h, w);
        for &(y, x) in &cells {
            for c in 0..3 {
                image.set(c, dy + y, dx + x, base.get(c, sy + y, sx + x));
            }
            mask.set(dy + y, dx + x, true);
        }
        if !fraction_ok(&mask) {
            continue;
        }
        return Ok(ForgerySample {
            image,
            mask,
            kind: ForgeryKind::CopyMove,
        });
    }
    Err(Error::Generation(format!(
        "no valid copy-move placement after {MAX_ATTEMPTS} attempts"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FillStats {
    pub sweeps: usize,
    /// Largest absolute change made by the final sweep.
    pub last_change: f32,
}

/// Fills the masked pixels of `img` with the harmonic interpolant of their
/// surroundings. Projected successive over-relaxation keeps every value
/// inside the `[min, max]` of the boundary ring of its channel.
pub fn diffusion_fill(img: &mut Image, region: &Mask, max_sweeps: usize, tol: f32) -> FillStats {
    let (h, w) = (img.height, img.width);
    let neighbours = |y: usize, x: usize| {
        let mut out = [(0usize, 0usize); 4];
        let mut n = 0;
        if y > 0 {
            out[n] = (y - 1, x);
            n += 1;
        }
        if y + 1 < h {
            out[n] = (y + 1, x);
            n += 1;
        }
        if x > 0 {
            out[n] = (y, x - 1);
            n += 1;
        }
        if x + 1 < w {
            out[n] = (y, x + 1);
            n += 1;
        }
        (out, n)
    };

    let mut cells = Vec::new();
    let mut ring = Vec::new();
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if region.get(y, x) {
                cells.push((y, x));
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            } else {
                let (nb, n) = neighbours(y, x);
                if nb[..n].iter().any(|&(ny, nx)| region.get(ny, nx)) {
                    ring.push((y, x));
                }
            }
        }
    }
    if cells.is_empty() || ring.is_empty() {
        return FillStats {
            sweeps: 0,
            last_change: 0.0,
        };
    }

    let extent = (y1 - y0).max(x1 - x0) + 1;
    let omega = 2.0 / (1.0 + (std::f32::consts::PI / (extent as f32 + 1.0)).sin());
    let mut bounds = [(0.0f32, 0.0f32); 3];
    for (c, b) in bounds.iter_mut().enumerate() {
        let vals = ring.iter().map(|&(y, x)| img.get(c, y, x));
        let lo = vals.clone().fold(f32::INFINITY, f32::min);
        let hi = vals.clone().fold(f32::NEG_INFINITY, f32::max);
        let mean = (vals.map(f64::from).sum::<f64>() / ring.len() as f64) as f32;
        *b = (lo, hi);
        for &(y, x) in &cells {
            img.set(c, y, x, mean.clamp(lo, hi));
        }
    }

    let mut stats = FillStats {
        sweeps: 0,
        last_change: f32::INFINITY,
    };
    while stats.sweeps < max_sweeps && stats.last_change >= tol {
        let mut change = 0.0f32;
        for &(y, x) in &cells {
            let (nb, n) = neighbours(y, x);
            for (c, &(lo, hi)) in bounds.iter().enumerate() {
                let avg = nb[..n].iter().map(|&(ny, nx)| img.get(c, ny, nx)).sum::<f32>() / n as f32;
                let old = img.get(c, y, x);
                let new = (old + omega * (avg - old)).clamp(lo, hi);
                change = change.max((new - old).abs());
                img.set(c, y, x, new);
            }
        }
        stats.sweeps += 1;
        stats.last_change = change;
    }
    stats
}

pub const REMOVAL_MAX_SWEEPS: usize = 2000;
pub const REMOVAL_TOLERANCE: f32 = 1e-5;

/// Erases a random region and diffuses the surroundings into it.
pub fn generate_removal<R: Rng + ?Sized>(base: &Image, rng: &mut R) -> Result<ForgerySample> {
    let (h, w) = (base.height, base.width);
    for _ in 0..MAX_ATTEMPTS {
        let mask = random_region(h, w, rng);
        if !fraction_ok(&mask) {
            continue;
        }
        let mut image = base.clone();
        diffusion_fill(&mut image, &mask, REMOVAL_MAX_SWEEPS, REMOVAL_TOLERANCE);
        return Ok(ForgerySample {
            image,
            mask,
            kind: ForgeryKind::Removal,
        });
    }
    Err(Error::Generation(format!(
        "no valid removal region after {MAX_ATTEMPTS} attempts"
    )))
}

/// One procedurally generated sample, fully determined by `(kind, size, seed)`.
pub fn generate_sample(kind: ForgeryKind, height: usize, width: usize, seed: u64) -> Result<ForgerySample> {
    let mut rng = rng_for(seed, "sample");
    let base = photograph(height, width, NoiseProfile::BASE, &mut rng);
    match kind {
        ForgeryKind::Splice => {
            let donor = photograph(height, width, NoiseProfile::DONOR, &mut rng);
            generate_splice(&base, &donor, false, &mut rng)
        }
        ForgeryKind::CopyMove => generate_copy_move(&base, &mut rng),
        ForgeryKind::Removal => generate_removal(&base, &mut rng),
    }
}

/// Same as [`generate_sample`] but drawing base and donor from a fixed pool
/// of images (e.g. a folder of photographs), all of one size.
pub fn generate_sample_from_pool(kind: ForgeryKind, pool: &[Image], seed: u64) -> Result<ForgerySample> {
    if pool.is_empty() {
        return Err(Error::Generation("empty base image pool".into()));
    }
    let mut rng = rng_for(seed, "sample");
    let base = &pool[rng.random_range(0..pool.len())];
    match kind {
        ForgeryKind::Splice => {
            if pool.len() < 2 {
                return Err(Error::Generation("splicing needs at least two pool images".into()));
            }
            let mut j = rng.random_range(0..pool.len());
            while std::ptr::eq(&pool[j], base) {
                j = rng.random_range(0..pool.len());
            }
            generate_splice(base, &pool[j], false, &mut rng)
        }
        ForgeryKind::CopyMove => generate_copy_move(base, &mut rng),
        ForgeryKind::Removal => generate_removal(base, &mut rng),
    }
}
