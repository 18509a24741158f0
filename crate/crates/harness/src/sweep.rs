//! λ grids over several seeds, and the deviation/OOD correlation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spd_core::models::MlpModel;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::stats::{mean, pearson};
use crate::train::{finetune_from, pretrain, Benchmark, FinetuneOptions, MetricsRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub mean_ood: f64,
    pub mean_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson_r: f64,
    pub n_lambdas: usize,
    pub per_lambda: Vec<LambdaSummary>,
}

/// Runs `base` once per `(λ, seed)` with the base fine-tuning mode and the
/// given λ, and returns the final-epoch rows ordered by λ (ascending) then by
/// seed (as given). One pretrained model is shared by all λ of a seed.
pub fn lambda_sweep(
    base: &ExperimentConfig,
    lambdas: &[f64],
    seeds: &[u64],
    parallel: bool,
) -> Result<Vec<MetricsRow>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config(
            "a sweep needs at least one λ and one seed".into(),
        ));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(HarnessError::Config(format!(
            "λ must be finite and >= 0, got {bad}"
        )));
    }
    let mut lambdas = lambdas.to_vec();
    lambdas.sort_by(f64::total_cmp);
    base.validate()?;

    let prepare = |&seed: &u64| -> Result<(Benchmark, MlpModel)> {
        let cfg = base.with_seed(seed);
        let data = Benchmark::generate(&cfg)?;
        let (model, _) = pretrain(&cfg, &data)?;
        Ok((data, model))
    };
    let pretrained: Vec<(Benchmark, MlpModel)> = if parallel {
        seeds.par_iter().map(prepare).collect::<Result<_>>()?
    } else {
        seeds.iter().map(prepare).collect::<Result<_>>()?
    };

    let jobs: Vec<(f64, usize)> = lambdas
        .iter()
        .flat_map(|&l| (0..seeds.len()).map(move |s| (l, s)))
        .collect();
    let run = |&(lambda, s): &(f64, usize)| -> Result<MetricsRow> {
        let cfg = base
            .with_seed(seeds[s])
            .with_finetune_mode(base.finetune.optimizer.reg_mode, lambda);
        let (data, model) = &pretrained[s];
        let mut out = finetune_from(model, &cfg, data, FinetuneOptions::default())?;
        Ok(out.rows.pop().expect("at least one epoch"))
    };
    if parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}

/// Pearson r between per-λ mean deviation and per-λ mean OOD accuracy.
pub fn correlation(rows: &[MetricsRow]) -> Result<Correlation> {
    let mut per_lambda: Vec<(f64, Vec<&MetricsRow>)> = Vec::new();
    for r in rows {
        match per_lambda
            .iter_mut()
            .find(|(l, _)| l.to_bits() == r.lambda.to_bits())
        {
            Some((_, group)) => group.push(r),
            None => per_lambda.push((r.lambda, vec![r])),
        }
    }
    per_lambda.sort_by(|a, b| a.0.total_cmp(&b.0));
    let per_lambda: Vec<LambdaSummary> = per_lambda
        .into_iter()
        .map(|(lambda, group)| LambdaSummary {
            lambda,
            mean_ood: mean(&group.iter().map(|r| r.ood_avg).collect::<Vec<_>>()),
            mean_deviation: mean(&group.iter().map(|r| r.deviation_total).collect::<Vec<_>>()),
        })
        .collect();
    let devs: Vec<f64> = per_lambda.iter().map(|s| s.mean_deviation).collect();
    let oods: Vec<f64> = per_lambda.iter().map(|s| s.mean_ood).collect();
    let pearson_r = pearson(&devs, &oods)?;
    Ok(Correlation {
        pearson_r,
        n_lambdas: per_lambda.len(),
        per_lambda,
    })
}
