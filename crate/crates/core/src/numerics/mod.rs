//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{Binding, Entry, Init, ParamId, ParameterSet};
pub use tensor::{Real, Tensor};
