//! Minimal reverse-mode differentiable array engine.

pub mod adam;
pub(crate) mod conv;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradcheck, gradcheck_with, GradReport, GradcheckOptions};
pub use graph::{softplus, stable_sigmoid, Graph, OpKind, Var};
pub use params::ParamSet;
pub use tensor::{Scalar, Tensor};
