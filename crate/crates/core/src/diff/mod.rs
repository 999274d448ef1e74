//! Minimal reverse-mode differentiable array engine.

pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{Adam, AdamConfig, Sgd};
pub use params::{Gradients, ParamId, ParamStore, StoreId};
pub use tape::{lstm_step, Backward, Tape, Var, EPS};
pub use tensor::Tensor;
