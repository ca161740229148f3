//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Build a [`Graph`], register inputs with [`Graph::param`] (differentiable)
//! or [`Graph::constant`], compose operations, then call
//! [`Graph::backward`] on a scalar node and read [`Graph::grad`].

mod gradcheck;
mod graph;
mod ops;

pub use gradcheck::{grad_check, grad_check_many, grad_check_with, Stencil, GradCheckReport};
pub use graph::{Graph, Var};
pub use ops::AttnMask;

#[cfg(test)]
mod tests;
