use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {actual} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {dim} mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("cannot reshape {from} into {to}")]
    Reshape { from: Shape, to: Shape },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("bce_loss: target value {0} is not 0 or 1")]
    NonBinaryTarget(f64),
    #[error("backward: loss must be a single element, got {0}")]
    NonScalarLoss(Shape),
    #[error("backward already ran on this graph; record a new forward pass")]
    BackwardTwice,
    #[error("adam: non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("adam: {0} gradients supplied for {1} parameters")]
    GradientCount(usize, usize),
}
