//! Dense `f64` tensors, a reverse-mode gradient tape and the Adam optimizer.

mod adam;
mod graph;
mod tensor;

pub use adam::AdamState;
pub use graph::{
    inverse_softplus, lse_slice, matern52_value, softplus_value, Gradients, Graph, Var, DIAG_FLOOR,
};
pub use tensor::Tensor;
