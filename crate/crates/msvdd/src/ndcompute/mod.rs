//! Deterministic reverse-mode differentiable array engine.
//!
//! `Tape` records every primitive application; `Tape::backward` replays the
//! record in reverse for exact gradients of a scalar loss. The fused
//! sequence kernels (conv1d, deconv1d, LSTM) live in `nn`.

mod gradcheck;
pub mod nn;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Tensor, TensorId};
