//! Synthetic distribution-shift benchmark for the SPD optimizer family:
//! data generation, pretraining and fine-tuning protocols, λ sweeps,
//! gradient-statistics probes and the verification suite behind the `spd`
//! binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod output;
pub mod probes;
pub mod stats;
pub mod sweep;
pub mod train;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
