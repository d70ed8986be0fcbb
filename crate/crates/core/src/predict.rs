//! Inference helpers over images.

use forgeloc_autograd::{Graph, ParamStore, Tensor};

use crate::data::Image;
use crate::error::Result;
use crate::network::CoarseToFineModel;

/// Per-pixel tamper probabilities of one image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub refined: Vec<f32>,
    pub coarse: Option<Vec<f32>>,
}

/// Runs the model on a batch tensor; returns `(refined, coarse)` masks.
pub fn predict_tensor(
    model: &CoarseToFineModel,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let mut g = Graph::frozen();
    let x = g.constant(images.clone());
    let out = model.forward(&mut g, store, x)?;
    Ok((
        g.value(out.refined_mask).clone(),
        out.coarse_mask.map(|c| g.value(c).clone()),
    ))
}

pub fn predict(model: &CoarseToFineModel, store: &ParamStore<f32>, image: &Image) -> Result<Prediction> {
    let (refined, coarse) = predict_tensor(model, store, &image.to_tensor())?;
    Ok(Prediction {
        height: image.height,
        width: image.width,
        refined: refined.into_vec(),
        coarse: coarse.map(Tensor::into_vec),
    })
}
