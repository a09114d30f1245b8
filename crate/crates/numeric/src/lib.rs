//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! Values are 64-bit reals. A [`Graph`] records every operation applied to
//! its nodes; [`Graph::backward`] walks the record in reverse and returns
//! per-parameter gradients. [`gradcheck`] compares those gradients against
//! central finite differences.

mod error;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use error::NumericError;
pub use gradcheck::{
    flatten_gradients, gradient_check, max_relative_error, numeric_gradients, GradCheckReport,
};
pub use graph::{AttentionLayout, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NumericError>;

/// Lower bound applied to every norm that ends up in a denominator.
pub const NORM_FLOOR: f64 = 1e-12;
