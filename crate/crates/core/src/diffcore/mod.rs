//! Minimal reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, TensorCheck, RELATIVE_FLOOR};
pub use graph::{softmax_row, Activation, Graph, Var};
pub use params::{NamedArray, Param, ParamId, ParamStore};
pub use tensor::Tensor;
