//! Dense tensors, reverse-mode differentiation, Adam and gradient checking.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, relative_error, GradReport, ParamCheck};
pub use graph::{log_softmax, sigmoid, softmax, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
