//! Differentiable operations, implemented as methods on [`crate::Var`].

pub mod conv;
pub mod elementwise;
pub mod embed;
pub mod matmul;
pub mod norm;
pub mod reduce;
pub mod resize;
pub mod shape;
