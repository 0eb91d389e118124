//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]s. A forward pass records operations on a
//! [`Tape`]; [`Tape::backward`] replays the tape in reverse and returns
//! [`Gradients`]. Trainable parameters live in a [`ParamStore`] outside
//! of any tape so that a fresh tape can be built for every step.

mod checkpoint;
mod error;
pub mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CheckpointHeader};
pub use error::{Error, Result};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Init, ParamId, ParamStore};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::Tensor;
