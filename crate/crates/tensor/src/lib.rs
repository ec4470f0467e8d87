//! Small dense-tensor library: row-major [`Tensor`]s, a define-by-run
//! autodiff [`Graph`], named parameter sets and an AdamW optimizer.

mod element;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_report, GradCheckReport};
pub use graph::{CustomBackward, Gradients, Graph, Var};
pub use optim::{adamw_step, AdamW, AdamWConfig, OptimizerState};
pub use params::{Bound, Param, ParamGrads, ParamId, ParamSet};
pub use tensor::Tensor;
