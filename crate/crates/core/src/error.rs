use std::path::PathBuf;

use forgeloc_autograd::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::data::io::ImageIoError;
use crate::data::manifest::ManifestError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    ImageIo(#[from] ImageIoError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("model config: {0}")]
    ModelConfig(String),
    #[error("input {height}x{width} is not divisible by 4")]
    InputSize { height: usize, width: usize },
    #[error("refined net expects {expected} feature channels, got {actual}")]
    FeatureChannels { expected: usize, actual: usize },
    #[error("non-finite loss at iteration {iteration} phase {phase}")]
    NonFiniteLoss { iteration: u64, phase: u8 },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("{0}")]
    Generation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
