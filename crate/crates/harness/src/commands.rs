//! The work behind each CLI subcommand, callable in-process.

use std::path::Path;

use spd_core::rng;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::output::{json_bytes, layers_csv, metrics_csv, write_atomic};
use crate::probes::{
    descent_bound_probe, grad_variance_probe, DescentProbe, DescentSetup, PairSampling,
    VarianceProbe,
};
use crate::sweep::{correlation, lambda_sweep, Correlation};
use crate::train::{
    self, prepare_finetune, pretrain, run_experiment, Benchmark, FinetuneOptions, RunOutput,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAYERS_FILE: &str = "layers.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.spd";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CORRELATION_FILE: &str = "correlation.json";

/// One experiment; writes metrics.csv, layers.csv and the fine-tuned checkpoint.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    let opts = FinetuneOptions {
        record_steps: true,
        ..Default::default()
    };
    let result = run_experiment(cfg, opts)?;
    let rows = &result.outcome.rows;
    write_atomic(&out.join(METRICS_FILE), &metrics_csv(rows)?)?;
    write_atomic(
        &out.join(LAYERS_FILE),
        &layers_csv(&train::run_id(cfg), &result.outcome.reports)?,
    )?;
    write_atomic(
        &out.join(CHECKPOINT_FILE),
        result.outcome.model.checkpoint_string().as_bytes(),
    )?;
    Ok(result)
}

/// A λ × seed grid; writes sweep.csv, then correlation.json when the
/// correlation is defined. The correlation error is returned after the
/// table has been written.
pub fn sweep_to_dir(
    cfg: &ExperimentConfig,
    lambdas: &[f64],
    seeds: &[u64],
    out: &Path,
    parallel: bool,
) -> Result<Correlation> {
    let rows = lambda_sweep(cfg, lambdas, seeds, parallel)?;
    write_atomic(&out.join(SWEEP_FILE), &metrics_csv(&rows)?)?;
    let corr = correlation(&rows)?;
    write_atomic(&out.join(CORRELATION_FILE), &json_bytes(&corr)?)?;
    Ok(corr)
}

pub const VARIANCE_PAIRS: usize = 5000;

/// Gradient-pair probe at the model fine-tuning starts from, on the target
/// training set with the fine-tuning batch size.
pub fn probe_variance(cfg: &ExperimentConfig, n_pairs: usize) -> Result<VarianceProbe> {
    cfg.validate()?;
    let data = Benchmark::generate(cfg)?;
    let (pretrained, _) = pretrain(cfg, &data)?;
    let (model, _) = prepare_finetune(&pretrained, cfg)?;
    grad_variance_probe(
        &model,
        &data.target_train,
        cfg.finetune.batch_size,
        n_pairs,
        PairSampling::Independent,
        &mut rng::stream(cfg.seed, train::STREAM_PROBES),
    )
}

/// The descent probe with its standard settings: a 10-dim quadratic, 50
/// steps, 10k trials per step, noise σ = 0.1.
pub fn descent_setup(l: f64, eta: f64) -> DescentSetup {
    DescentSetup {
        dim: 10,
        l,
        eta,
        steps: 50,
        trials: 10_000,
        noise_sigma: 0.1,
        seed: 0,
    }
}

pub fn probe_descent(l: f64, eta: f64) -> Result<DescentProbe> {
    descent_bound_probe(&descent_setup(l, eta))
}
