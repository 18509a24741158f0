//! Adam-family optimizers with anchored decay, including selective
//! projection decay (SPD), over a small dense tensor and reverse-mode
//! autodiff core.
//!
//! ```
//! use std::collections::BTreeMap;
//! use spd_core::optim::{self, LayerState, OptimizerConfig, RegMode};
//! use spd_core::Tensor;
//!
//! let theta = Tensor::vector(vec![1.0, -2.0]).unwrap();
//! let mut states = vec![LayerState::anchored_here("w", theta)];
//! let cfg = OptimizerConfig::adam(1e-2).with_mode(RegMode::Spd, 1.0);
//! let grads = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.5, 0.5]).unwrap())]);
//! let report = optim::step(&mut states, &grads, &cfg).unwrap();
//! assert!(!report.records[0].fired); // no displacement yet
//! ```

pub mod autodiff;
pub mod error;
pub mod models;
pub mod optim;
pub mod peft;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
