//! Flow-matching return-distribution critics for offline and
//! offline-to-online reinforcement learning.
pub mod baselines;
pub mod critic;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod eval;
pub mod flowkit;
pub mod metrics;
pub mod policies;
pub mod trainer;

pub use error::{Error, Result};
