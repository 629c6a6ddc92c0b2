//! Minimal reverse-mode differentiable tensor engine.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, CoordError, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{truncated_normal, Gradients, ModuleGroup, ParamId, ParamStore, Parameter};
pub use tensor::{DType, Real, Tensor};

