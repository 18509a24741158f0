//! End-to-end properties of the fine-tuning protocol on real runs.

use spd_core::optim::RegMode;
use spd_harness::config::HeadPolicy;
use spd_harness::sweep::{correlation, lambda_sweep};
use spd_harness::train::{finetune_from, pretrain, Benchmark, FinetuneOptions};
use spd_harness::verify::small_benchmark;
use spd_harness::ExperimentConfig;

#[test]
fn pretrained_model_fits_the_source_domain() {
    let cfg = ExperimentConfig::default_benchmark();
    let data = Benchmark::generate(&cfg).unwrap();
    let (model, anchor) = pretrain(&cfg, &data).unwrap();
    assert!(model.accuracy(&data.source.x, &data.source.labels).unwrap() >= 0.9);
    for (id, t) in model.params() {
        assert_eq!(anchor.get(&id).unwrap(), t);
    }
}

#[test]
fn spd_run_deviates_less_than_plain_adam() {
    let cfg = ExperimentConfig::default_benchmark();
    let data = Benchmark::generate(&cfg).unwrap();
    let (model, _) = pretrain(&cfg, &data).unwrap();
    let last = |mode, lambda| {
        let c = cfg.with_finetune_mode(mode, lambda);
        finetune_from(&model, &c, &data, FinetuneOptions::default())
            .unwrap()
            .rows
            .pop()
            .unwrap()
    };
    let (adam, spd) = (last(RegMode::None, 0.0), last(RegMode::Spd, 1.0));
    assert!(spd.deviation_total < adam.deviation_total);
}

/// Covariance and variances accumulated in two passes over the data.
fn two_pass_r(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (n - 1.0);
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (n - 1.0);
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (n - 1.0);
    cov / (vx * vy).sqrt()
}

#[test]
fn sweep_correlation_matches_two_pass_formula() {
    let cfg = small_benchmark();
    let lambdas = [0.0, 0.5, 1.0, 2.0];
    let rows = lambda_sweep(&cfg, &lambdas, &[0, 1], false).unwrap();
    assert_eq!(rows.len(), 8);
    let c = correlation(&rows).unwrap();
    let mut devs = Vec::new();
    let mut oods = Vec::new();
    for l in lambdas {
        let group: Vec<_> = rows.iter().filter(|r| r.lambda == l).collect();
        devs.push(group.iter().map(|r| r.deviation_total).sum::<f64>() / group.len() as f64);
        oods.push(group.iter().map(|r| r.ood_avg).sum::<f64>() / group.len() as f64);
    }
    assert!((c.pearson_r - two_pass_r(&devs, &oods)).abs() <= 1e-12);
    for r in &rows {
        r.check_consistency().unwrap();
        assert_eq!(r.epoch, cfg.finetune.epochs);
    }
}

#[test]
fn single_lambda_sweep_has_no_correlation() {
    let rows = lambda_sweep(&small_benchmark(), &[0.0], &[0, 1], false).unwrap();
    assert!(correlation(&rows).is_err());
}

#[test]
fn linear_probe_fits_separable_target() {
    let mut cfg = small_benchmark();
    cfg.target.noise_sigma = 0.05;
    cfg.finetune.head = HeadPolicy::Reinit;
    cfg.finetune.lp_epochs = 5;
    let data = Benchmark::generate(&cfg).unwrap();
    let (model, _) = pretrain(&cfg, &data).unwrap();
    let out = finetune_from(&model, &cfg, &data, FinetuneOptions::default()).unwrap();
    assert_eq!(out.rows.len(), cfg.finetune.lp_epochs + cfg.finetune.epochs);
    let probe_end = &out.rows[cfg.finetune.lp_epochs - 1];
    assert!(probe_end.id_acc >= 0.9, "{}", probe_end.id_acc);
    assert_eq!(probe_end.deviation_total, 0.0);
}
