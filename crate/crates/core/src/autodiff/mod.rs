//! Reverse-mode automatic differentiation over dense tensors.

mod graph;
mod loss;
mod optim;
mod real;
mod tensor;

pub use graph::{Graph, Var, NO_INDEX};
pub use loss::{forward, hvp, loss_and_grad, Batch, ComputeGraph};
pub use optim::{sgd_step, LrSchedule, OptimState, SgdConfig};
pub use real::Real;
pub use tensor::Tensor;
