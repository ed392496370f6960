//! Minimal reverse-mode differentiation: dense arrays, a batched tape,
//! MLPs and optimizers.

mod array;
pub mod kernels;
mod mlp;
mod optim;
mod params;
mod tape;

pub use array::DenseArray;
pub use kernels::{gelu, sigmoid};
pub use mlp::{input_derivative, input_derivative_batch, mlp_forward, MlpGrads, MlpSpec, MlpTape};
pub use optim::{adam_step, clip_global_norm, AdamConfig, OptState};
pub use params::{ema_update, ParamSet};
pub use tape::{BoundParams, Gradients, Tape, Var};
