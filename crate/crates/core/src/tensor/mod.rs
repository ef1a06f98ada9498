//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Learnable state lives in [`Tensor`]s owned by model structs. A forward pass
//! binds them into a [`Graph`] with [`Graph::param`], records operations, and
//! [`Graph::backward`] accumulates gradients that [`Graph::write_grad`] copies
//! back. Storage is `T`; reductions and normalization statistics accumulate
//! in `f64`. In debug builds every op checks its output for NaN/Inf.

mod grad;
mod graph;
mod ops;
#[allow(clippy::module_inception)]
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::{Tensor, TensorId};
