//! Adaptive task-relational context distillation for dense multi-task
//! prediction, with the supporting autodiff engine, label-space
//! discretization, context-type search and analysis statistics.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod contexts;
pub mod error;
pub mod label_space;
pub mod nas;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod pnm;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor, TensorError};
