//! Image forgery localisation: a coarse-to-fine network over channel-wise
//! high-pass noise features with forgery attention, trained with
//! self-adversarial (FGSM) augmentation.
//!
//! The numerical engine lives in `forgeloc-autograd`; this crate holds the
//! model, training loop, synthetic data, metrics and file formats.
//!
//! ```
//! use forgeloc::{network::{CoarseToFineModel, ModelConfig}, seed::rng_for, predict::predict, data::Image};
//!
//! let cfg = ModelConfig { nbf: 4, k: 4, convs_per_block: 1, input_size: (16, 16), ..ModelConfig::default() };
//! let (model, params) = CoarseToFineModel::new(cfg, &mut rng_for(0, "init")).unwrap();
//! let mask = predict(&model, &params, &Image::filled(16, 16, [0.5; 3])).unwrap();
//! assert!(mask.refined.iter().all(|&p| p > 0.0 && p < 1.0));
//! ```

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod hpf;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod predict;
pub mod seed;
pub mod train;
pub mod visualize;

pub use error::{Error, Result};
