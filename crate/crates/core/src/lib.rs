//! Safety-aware offline reinforcement learning on a lane-world driving task.

pub mod cbl;
pub mod config;
pub mod dataset;
pub mod env;
pub mod error;
pub mod model;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod trainer;

pub use error::{FusionError, Result};
