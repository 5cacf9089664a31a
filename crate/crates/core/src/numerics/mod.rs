//! Dense tensors and a single-use reverse-mode tape covering the operator set
//! the classifier needs.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{bce_term, gelu, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
