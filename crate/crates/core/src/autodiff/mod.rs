//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! then walks the tape once in reverse. Graphs are single-owner and cheap to
//! rebuild, so callers create a fresh one per forward pass.

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use tensor::dot;

#[cfg(test)]
mod tests;
