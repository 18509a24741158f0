//! Declarative experiment description, loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spd_core::models::Activation;
use spd_core::optim::{AnchorMode, OptimizerConfig, RegMode};

use crate::data::{DataShape, DomainSpec, Geometry};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Layer widths from input to class count.
    pub dims: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub geometry: Geometry,
    /// Size of the held-out target sample used for ID accuracy.
    pub test_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

/// What fine-tuning does with the pretrained output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    /// Replace it with a fresh layer, anchored at its fresh init and left out
    /// of the deviation metric.
    Reinit,
    /// Fine-tune it like every other pretrained tensor.
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub head: HeadPolicy,
    /// Head-only epochs before full fine-tuning (LP-FT); 0 disables the stage.
    #[serde(default)]
    pub lp_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftConfig {
    pub enabled: bool,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub ood: Vec<DomainSpec>,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub peft: PeftConfig,
}

fn domain(rotation_deg: f64, noise_sigma: f64, n_samples: usize, seed: u64) -> DomainSpec {
    DomainSpec {
        rotation_deg,
        rotation_spread_deg: 0.0,
        noise_sigma,
        n_samples,
        seed,
    }
}

impl ExperimentConfig {
    /// The reference benchmark: 16-dim inputs and 5 classes. The source
    /// spins the rotating half of the signal through every angle, so the
    /// pretrained model leans on the shared half; the target fixes it at 30°
    /// with heavier noise; OOD domains sit at 60°, 90° and a noisier 30°.
    pub fn default_benchmark() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                dims: vec![16, 64, 64, 5],
                activation: Activation::Relu,
            },
            data: DataConfig {
                geometry: Geometry::SplitPlane,
                test_samples: 1000,
            },
            source: DomainSpec {
                rotation_spread_deg: 360.0,
                ..domain(0.0, 0.05, 2000, 1)
            },
            target: domain(30.0, 0.3, 2000, 2),
            ood: vec![
                domain(60.0, 0.1, 1000, 3),
                domain(90.0, 0.1, 1000, 4),
                domain(30.0, 0.4, 1000, 5),
            ],
            pretrain: PretrainConfig {
                optimizer: OptimizerConfig::adam(1e-3),
                epochs: 20,
                batch_size: 64,
            },
            finetune: FinetuneConfig {
                optimizer: OptimizerConfig::adam(1e-2).with_mode(RegMode::Spd, 1.0),
                epochs: 10,
                batch_size: 16,
                head: HeadPolicy::Keep,
                lp_epochs: 0,
            },
            peft: PeftConfig {
                enabled: false,
                rank: 4,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn shape(&self) -> DataShape {
        DataShape {
            dim: self.model.dims[0],
            classes: *self.model.dims.last().expect("validated"),
            geometry: self.data.geometry,
        }
    }

    /// The same experiment with a different fine-tuning mode and strength.
    pub fn with_finetune_mode(&self, mode: RegMode, lambda: f64) -> Self {
        let mut cfg = self.clone();
        cfg.finetune.optimizer.reg_mode = mode;
        cfg.finetune.optimizer.lambda = lambda;
        cfg
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let dims = &self.model.dims;
        if dims.len() < 2 || dims.contains(&0) {
            return bad(format!(
                "model dims must list at least two positive widths, got {dims:?}"
            ));
        }
        if dims[0] < self.data.geometry.min_dim() {
            return bad(format!(
                "{:?} geometry needs at least {} inputs",
                self.data.geometry,
                self.data.geometry.min_dim()
            ));
        }
        if dims[dims.len() - 1] < 2 {
            return bad("at least two classes are needed".into());
        }
        if self.data.test_samples == 0 {
            return bad("test_samples must be positive".into());
        }
        if self.ood.is_empty() {
            return bad("at least one OOD domain is needed".into());
        }
        for (name, d) in [("source", &self.source), ("target", &self.target)]
            .into_iter()
            .chain(self.ood.iter().map(|d| ("ood", d)))
        {
            if d.n_samples == 0
                || d.noise_sigma.is_nan()
                || d.noise_sigma < 0.0
                || !d.rotation_deg.is_finite()
                || !(0.0..=360.0).contains(&d.rotation_spread_deg)
            {
                return bad(format!("{name} domain is invalid: {d:?}"));
            }
        }
        self.pretrain.optimizer.validate()?;
        self.finetune.optimizer.validate()?;
        for (stage, epochs, batch, n) in [
            (
                "pretrain",
                self.pretrain.epochs,
                self.pretrain.batch_size,
                self.source.n_samples,
            ),
            (
                "finetune",
                self.finetune.epochs,
                self.finetune.batch_size,
                self.target.n_samples,
            ),
        ] {
            if epochs == 0 {
                return bad(format!("{stage} epochs must be positive"));
            }
            if batch == 0 || batch > n {
                return bad(format!(
                    "{stage} batch_size must lie in [1, {n}], got {batch}"
                ));
            }
        }
        if self.peft.enabled {
            let min_width = dims.iter().copied().min().expect("non-empty");
            if self.peft.rank == 0 || self.peft.rank > min_width {
                return bad(format!("peft rank must lie in [1, {min_width}]"));
            }
            if self.finetune.optimizer.anchor_mode != AnchorMode::Origin {
                return bad("adapter tensors must be anchored at the origin".into());
            }
            if self.finetune.head != HeadPolicy::Keep || self.finetune.lp_epochs > 0 {
                return bad("peft mode adapts every layer; use head = keep and no LP stage".into());
            }
        }
        if self.finetune.lp_epochs > 0 && self.finetune.head != HeadPolicy::Reinit {
            return bad("the LP stage needs a re-initialized head".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default_benchmark();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::default_benchmark().to_json()).unwrap();
        value["finetune"]["optimizer"]["weight_decay"] = serde_json::json!(0.1);
        assert!(ExperimentConfig::from_json(&value.to_string()).is_err());

        let mut value: serde_json::Value =
            serde_json::from_str(&ExperimentConfig::default_benchmark().to_json()).unwrap();
        value["extra"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&value.to_string()).is_err());
    }

    #[test]
    fn out_of_range_settings_are_rejected() {
        let base = ExperimentConfig::default_benchmark();
        let mut c = base.clone();
        c.finetune.optimizer.beta1 = 1.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.finetune.batch_size = c.target.n_samples + 1;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.peft.enabled = true;
        assert!(c.validate().is_err(), "pretrained anchor with adapters");
        c.finetune.optimizer.anchor_mode = AnchorMode::Origin;
        c.validate().unwrap();
        let mut c = base.clone();
        c.model.dims = vec![3, 5];
        assert!(c.validate().is_err(), "split plane needs four inputs");
        let mut c = base;
        c.finetune.lp_epochs = 2;
        assert!(c.validate().is_err());
        c.finetune.head = HeadPolicy::Reinit;
        c.validate().unwrap();
    }
}
