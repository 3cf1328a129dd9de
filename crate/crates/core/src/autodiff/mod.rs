//! Reverse-mode differentiation, AdamW and the learning-rate schedule.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod program;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_detailed, GradCheck};
pub use graph::{CustomOp, Gradients, Graph, NodeId, LAYER_NORM_EPS};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use params::{Bound, Param, ParamSet};
pub use program::{evaluate, evaluate_bound, Evaluation, Instr, Program};
pub use tensor::Tensor;
