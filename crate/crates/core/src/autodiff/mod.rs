//! Minimal reverse-mode automatic differentiation over dense tensors.

pub mod archive;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck, GradCheckOptions};
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};
