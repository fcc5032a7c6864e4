//! Minimal CPU tensor library with reverse-mode automatic differentiation.
//!
//! Values are dense row-major [`Tensor`]s over an element type implementing
//! [`Scalar`] (`f32` or `f64`). Differentiable computations are expressed on
//! [`Var`]s; model parameters live in a [`ParamStore`] and are bound for a
//! single pass through a [`Session`].

pub mod autograd;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use autograd::Var;
pub use ops::conv::Conv2dSpec;
pub use ops::resize::ResampleKernel;
pub use params::{Mode, ParamId, ParamKind, ParamStore, Scope, Session};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
