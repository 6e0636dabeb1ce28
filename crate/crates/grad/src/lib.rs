//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Just enough machinery to train a small transformer: an eager [`Tape`] of
//! recorded ops, a reverse sweep that yields [`Gradients`], the Adam update
//! and a flat checkpoint format.

pub mod array;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;

pub use array::Array;
pub use error::{GradError, Result};
pub use kernels::{gaussian_nll, layer_norm, masked_softmax};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, OptimState};
pub use params::{load_checkpoint, save_checkpoint, ParamStore};
pub use tape::{Gradients, Tape, Var};
