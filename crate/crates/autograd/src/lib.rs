//! Reverse-mode automatic differentiation over small dense `f64` arrays,
//! with the layers, losses, optimizer and checkpoint format used to train
//! the scene encoder.

pub mod check;
pub mod checkpoint;
mod error;
mod graph;
pub mod nn;
pub mod optim;
mod params;
pub mod rng;
mod tensor;

pub use check::{grad_check, grad_check_params, grad_check_report, GradCheckReport};
pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use nn::{attention, Linear, Mlp};
pub use optim::{cosine_lr, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
