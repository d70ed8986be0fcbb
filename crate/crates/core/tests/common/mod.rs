#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use forgeloc::network::{CoarseToFineModel, ModelConfig};
use forgeloc::seed::rng_for;
use forgeloc_autograd::{ParamStore, Scalar, Shape, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(size: usize) -> ModelConfig {
    ModelConfig {
        nbf: 4,
        k: 4,
        convs_per_block: 1,
        input_size: (size, size),
        ..ModelConfig::default()
    }
}

pub fn build(cfg: ModelConfig, seed: u64) -> (CoarseToFineModel, ParamStore<f32>) {
    CoarseToFineModel::new(cfg, &mut rng_for(seed, "init")).unwrap()
}

/// Uniform images and masks holding one random axis-aligned rectangle.
pub fn random_batch<T: Scalar>(n: usize, h: usize, w: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut r = rng(seed);
    let images = Tensor::from_fn(Shape::new(n, 3, h, w), |_| T::from_f64_lossy(r.random::<f64>()));
    let mut masks = Tensor::zeros(Shape::new(n, 1, h, w));
    for s in 0..n {
        let y0 = r.random_range(0..h / 2);
        let x0 = r.random_range(0..w / 2);
        let y1 = r.random_range(y0 + 1..=h);
        let x1 = r.random_range(x0 + 1..=w);
        for y in y0..y1 {
            for x in x0..x1 {
                masks.set([s, 0, y, x], T::one());
            }
        }
    }
    (images, masks)
}

/// Hash over every parameter name and the bit pattern of every value.
pub fn param_hash(store: &ParamStore<f32>) -> u64 {
    let mut h = DefaultHasher::new();
    for (_, p) in store.iter() {
        p.name.hash(&mut h);
        p.trainable.hash(&mut h);
        for v in p.value.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Brute-force Mann-Whitney AUC over every positive/negative pair.
pub fn brute_force_auc(pred: &[f64], gt: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &pi) in pred.iter().enumerate() {
        if !gt[i] {
            continue;
        }
        for (j, &pj) in pred.iter().enumerate() {
            if gt[j] {
                continue;
            }
            pairs += 1.0;
            wins += if pi > pj {
                1.0
            } else if pi == pj {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}
