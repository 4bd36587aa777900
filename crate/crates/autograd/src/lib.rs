//! Minimal reverse-mode automatic differentiation for batched `[batch, rows, cols]`
//! f64 tensors.
//!
//! Operations are evaluated eagerly on a [`Graph`] tape; [`Graph::backward`]
//! walks the tape in reverse. Operands with batch (or row, or column) size 1 are
//! broadcast by the elementwise ops, and by [`Graph::matmul`] along the batch axis.

mod graph;
mod tensor;

pub mod finite_diff;

pub use graph::{Grads, Graph, Var};
pub use tensor::{Shape, Tensor};
