//! Reverse-mode automatic differentiation over dense tensors.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{CheckReport, Primitive};
pub use graph::{Gradients, Graph, Op, Var};
pub use tensor::{Real, Tensor};
