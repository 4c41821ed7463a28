//! Variational objective, optimizer and training loop.

pub mod adam;
pub mod elbo;
pub mod gradcheck;
pub mod train;

pub use adam::{AdamConfig, OptimizerState, StepOutcome};
pub use elbo::{Batch, Draws, ElboGradient, ElboOptions, ElboTerms};
pub use train::{StopRule, TrainConfig, TrainData, TrainOutcome};
