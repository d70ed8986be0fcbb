//! Dense rank-4 tensors with a recording graph for reverse-mode
//! differentiation, sized for small convolutional segmentation networks.
//!
//! ```
//! use forgeloc_autograd::{Graph, Shape, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.variable(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
//! let s = g.sum(x);
//! let grads = g.backward(s).unwrap();
//! assert!(grads.get(x).data().iter().all(|&v| v == 1.0));
//! ```

mod adam;
mod conv;
mod denormal;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use conv::{ConvGeometry, DepthwiseBank};
pub use denormal::FlushDenormals;
pub use error::TensorError;
pub use graph::{Gradients, Graph, Var, BCE_CLAMP};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
