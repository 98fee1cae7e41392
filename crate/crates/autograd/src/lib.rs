//! Reverse-mode automatic differentiation over dense, row-major CPU tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! backward closure. Calling [`Graph::backward`] on a scalar walks the record in
//! reverse creation order and accumulates gradients into every node that
//! transitively depends on a trainable leaf.
//!
//! The element type is generic over [`Real`] (`f32` and `f64`), so the same
//! model code can be trained in single precision and gradient-checked in
//! double precision.
//!
//! Operations outside the built-in set can be added with [`Graph::custom`],
//! which takes a forward value and a closure producing the vector-Jacobian
//! product.

mod error;
mod gradcheck;
mod graph;
mod ops;
mod real;
mod tensor;

pub use error::{AutogradError, Result};
pub use gradcheck::{grad_check, GradReport};
pub use graph::{GradSink, Gradients, Graph, Var};
pub use real::{accurate_sum, Real};
pub use tensor::Tensor;
