//! Minimal reverse-mode differentiable tensor engine, Adam, and a
//! reduce-on-plateau learning-rate schedule.

mod graph;
mod optim;
mod store;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{OptimizerConfig, OptimizerState, PlateauState};
pub use store::{ConfigHash, ParameterStore, FORMAT_VERSION};
pub use tensor::{DType, Real, Tensor};

pub use graph::sigmoid;
