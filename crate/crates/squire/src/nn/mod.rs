//! Minimal dense-tensor engine: forward ops, reverse-mode gradients, Adam
//! and the warmup/decay learning-rate schedule.
//!
//! Compute is generic over [`Real`] — `f32` for training, `f64` for the
//! finite-difference gradient tests.

mod optim;
mod tape;
mod tensor;

pub use optim::{lr_at, AdamConfig, ParamId, Params};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
