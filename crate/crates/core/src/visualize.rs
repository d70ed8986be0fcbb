//! Activation heatmaps of the noise and attention stages.

use forgeloc_autograd::{Graph, ParamStore, Tensor};

use crate::data::io::Raster8;
use crate::data::Image;
use crate::error::Result;
use crate::hpf::cw_hpf;
use crate::network::CoarseToFineModel;

/// One inspected stage, collapsed to a single map at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct StageMap {
    pub name: &'static str,
    pub height: usize,
    pub width: usize,
    /// Mean absolute activation over channels, row-major.
    pub values: Vec<f32>,
    /// Population variance over every element of the stage tensor.
    pub variance: f64,
}

pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).max(0.0)
}

/// Collapses sample 0 of `t` to one map and upsamples it (nearest) to `h x w`.
fn collapse(name: &'static str, t: &Tensor<f32>, height: usize, width: usize) -> StageMap {
    let [_, c, th, tw] = t.shape().0;
    let s = t.sample(0);
    let mut small = vec![0.0f32; th * tw];
    for ch in 0..c {
        for (i, v) in s.data()[ch * th * tw..(ch + 1) * th * tw].iter().enumerate() {
            small[i] += v.abs() / c as f32;
        }
    }
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = (y * th / height).min(th - 1);
        for x in 0..width {
            let sx = (x * tw / width).min(tw - 1);
            values.push(small[sy * tw + sx]);
        }
    }
    let all: Vec<f64> = s.data().iter().map(|&v| f64::from(v)).collect();
    StageMap {
        name,
        height,
        width,
        values,
        variance: variance(&all),
    }
}

/// Image-level CW-HPF response, plus the spatially and channel-weighted
/// attention features when the model has an attention module.
pub fn stage_maps(model: &CoarseToFineModel, store: &ParamStore<f32>, image: &Image) -> Result<Vec<StageMap>> {
    let (h, w) = (image.height, image.width);
    let input = image.to_tensor::<f32>();
    let mut maps = vec![collapse("cw_hpf", &cw_hpf(model.kernel_bank(), &input), h, w)];
    if model.attention().is_some() {
        let mut g = Graph::frozen();
        let x = g.constant(input);
        let out = model.forward(&mut g, store, x)?;
        if let Some(att) = out.refined_trace.attention {
            maps.push(collapse("sam_weighted", g.value(att.spatial_weighted), h, w));
            maps.push(collapse("cam_weighted", g.value(att.channel_weighted), h, w));
        }
    }
    Ok(maps)
}

/// Linear blue to red.
pub fn colormap(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Colours a map over its own `[min, max]`; a flat map sits at the minimum colour.
pub fn heatmap(values: &[f32]) -> Vec<[u8; 3]> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| colormap(if span > 0.0 { (v - lo) / span } else { 0.0 }))
        .collect()
}

/// Heatmap blended over the image with opacity `alpha`.
pub fn overlay(image: &Image, map: &StageMap, alpha: f32) -> Raster8 {
    let colours = heatmap(&map.values);
    let mut data = Vec::with_capacity(3 * map.height * map.width);
    for y in 0..map.height {
        for x in 0..map.width {
            let col = colours[y * map.width + x];
            for (c, &level) in col.iter().enumerate() {
                let base = image.get(c, y, x).clamp(0.0, 1.0) * 255.0;
                let v = alpha * f32::from(level) + (1.0 - alpha) * base;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Raster8 {
        width: map.width,
        height: map.height,
        channels: 3,
        data,
    }
}

/// The pure heatmap without the image underneath.
pub fn heatmap_raster(map: &StageMap) -> Raster8 {
    Raster8 {
        width: map.width,
        height: map.height,
        channels: 3,
        data: heatmap(&map.values).into_iter().flatten().collect(),
    }
}
