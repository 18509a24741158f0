//! Invariant and oracle checks, one per acceptance criterion.
//!
//! `Level::Full` runs each check at its stated size; `Level::Fast` shrinks
//! the expensive ones and skips the three benchmark-scale comparisons.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use spd_core::models::{Activation, MlpModel};
use spd_core::optim::{self, LayerState, OptimizerConfig, RegMode};
use spd_core::peft;
use spd_core::rng::{self, Rng};
use spd_core::Tensor;

use crate::commands;
use crate::config::ExperimentConfig;
use crate::data::{generate_domain, DataShape, Dataset, DomainSpec, Geometry};
use crate::error::Result;
use crate::output::metrics_csv;
use crate::probes::{descent_bound_probe, grad_variance_probe, DescentSetup, PairSampling};
use crate::stats::mean;
use crate::sweep::{correlation, lambda_sweep};
use crate::train::{finetune_from, pretrain, run_experiment, Benchmark, FinetuneOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    Fast,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(r: Result<Outcome>) -> Self {
        r.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")))
    }
}

pub const CRITERIA: [(u8, &str); 12] = [
    (1, "lambda=0 collapse to Adam"),
    (2, "projection onto previous radius at lambda=1"),
    (3, "weak and strong regime bounds"),
    (4, "hyper-gradient oracle"),
    (5, "approximate vs exact L2-SP"),
    (6, "gradient correctness"),
    (7, "independent gradient-pair probe"),
    (8, "descent-bound probe"),
    (9, "SPD vs Adam on the default benchmark"),
    (10, "lambda sweep correlation"),
    (11, "LoRA with origin-anchored SPD"),
    (12, "determinism and checkpoint round trip"),
];

/// Criteria the fast level runs.
pub fn fast_criteria() -> Vec<u8> {
    vec![1, 2, 3, 4, 5, 6, 7, 8, 12]
}

pub fn check(criterion: u8, level: Level) -> Outcome {
    let full = level == Level::Full;
    Outcome::from_result(match criterion {
        1 => zero_lambda_collapse(),
        2 => projection_identity(if full { 1000 } else { 200 }),
        3 => regime_bounds(if full { 10_000 } else { 2_000 }),
        4 => hypergradient_oracle(100),
        5 => approx_vs_exact_l2sp(),
        6 => gradient_check(if full { 50 } else { 10 }),
        7 => variance_probe(if full { 5000 } else { 1000 }),
        8 => descent_probe(if full { 10_000 } else { 2_000 }),
        9 => spd_vs_adam(),
        10 => sweep_correlation(),
        11 => lora_spd(),
        12 => determinism(full),
        _ => Ok(Outcome::new(false, format!("no criterion {criterion}"))),
    })
}

/// Runs the level's checks, printing one line each. Returns whether all passed.
pub fn run_suite(level: Level, out: &mut impl Write) -> std::io::Result<bool> {
    let ids = match level {
        Level::Fast => fast_criteria(),
        Level::Full => CRITERIA.iter().map(|(n, _)| *n).collect(),
    };
    let mut all = true;
    for n in ids {
        let start = Instant::now();
        let o = check(n, level);
        let name = CRITERIA[usize::from(n) - 1].1;
        writeln!(
            out,
            "{} [{n:>2}] {name}: {} ({:.1}s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        )?;
        all &= o.passed;
    }
    Ok(all)
}

fn random_data(rng: &mut Rng, n: usize, dim: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let x = Tensor::matrix(n, dim, rng::normals(rng, n * dim, 1.0)).expect("sizes match");
    let labels = (0..n).map(|i| i % classes).collect();
    (x, labels)
}

fn states_of(model: &MlpModel) -> Vec<LayerState> {
    model
        .params()
        .into_iter()
        .map(|(id, t)| LayerState::anchored_here(id, t.clone()))
        .collect()
}

fn train_steps(
    model: &mut MlpModel,
    states: &mut [LayerState],
    cfg: &OptimizerConfig,
    x: &Tensor,
    labels: &[usize],
    steps: usize,
) -> Result<Vec<optim::StepReport>> {
    let mut reports = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (_, grads) = model.loss_and_grads(x, labels)?;
        reports.push(optim::step(states, &grads, cfg)?);
        model.load_states(states)?;
    }
    Ok(reports)
}

fn zero_lambda_collapse() -> Result<Outcome> {
    let mut rng = rng::stream(101, 0);
    let mut model = MlpModel::init_with(&[6, 12, 12, 4], Activation::Tanh, &mut rng)?;
    let (x, labels) = random_data(&mut rng, 32, 6, 4);
    let mut other = model.clone();
    let mut sa = states_of(&model);
    let mut sb = states_of(&other);
    let spd = OptimizerConfig::adam(1e-2).with_mode(RegMode::Spd, 0.0);
    let adam = OptimizerConfig::adam(1e-2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        train_steps(&mut model, &mut sa, &spd, &x, &labels, 1)?;
        train_steps(&mut other, &mut sb, &adam, &x, &labels, 1)?;
        for (a, b) in sa.iter().zip(&sb) {
            for (p, q) in a.theta.data().iter().zip(b.theta.data()) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    Ok(Outcome::new(
        worst <= 1e-12,
        format!("max |Δθ| = {worst:.3e} over 100 steps"),
    ))
}

fn projection_identity(needed: usize) -> Result<Outcome> {
    let mut rng = rng::stream(102, 0);
    let mut model = MlpModel::init_with(&[6, 16, 16, 4], Activation::Relu, &mut rng)?;
    let mut states = states_of(&model);
    let cfg = OptimizerConfig::adam(2e-2).with_mode(RegMode::Spd, 1.0);
    let (mut checked, mut worst) = (0usize, 0.0f64);
    let mut steps = 0;
    while checked < needed && steps < 20_000 {
        let (x, labels) = random_data(&mut rng, 16, 6, 4);
        let report = &train_steps(&mut model, &mut states, &cfg, &x, &labels, 1)?[0];
        steps += 1;
        for r in &report.records {
            if r.fired && r.gamma_t > r.gamma_prev {
                checked += 1;
                worst = worst.max((r.post_deviation - r.gamma_prev).abs() / r.gamma_prev);
            }
        }
    }
    Ok(Outcome::new(
        checked >= needed && worst <= 1e-9,
        format!("{checked} expanding regularized layer-steps in {steps} steps, max rel error {worst:.3e}"),
    ))
}

fn regime_bounds(trials: usize) -> Result<Outcome> {
    let mut rng = rng::stream(103, 0);
    let (mut weak, mut strong, mut violations) = (0usize, 0usize, 0usize);
    for i in 0..trials {
        let dim = 1 + i % 8;
        let theta0 = rng::normals(&mut rng, dim, 1.0);
        let scale: f64 = rand::Rng::random_range(&mut rng, 0.01..2.0);
        let theta: Vec<f64> = theta0
            .iter()
            .zip(rng::normals(&mut rng, dim, scale))
            .map(|(a, d)| a + d)
            .collect();
        let alpha: f64 = rand::Rng::random_range(&mut rng, 1e-3..0.5);
        let lambda: f64 = if i % 2 == 0 {
            rand::Rng::random_range(&mut rng, 1e-6..=1.0)
        } else {
            rand::Rng::random_range(&mut rng, 1.0 + 1e-9..10.0)
        };
        let cfg = OptimizerConfig::adam(alpha).with_mode(RegMode::Spd, lambda);
        let mut state = [LayerState::new(
            "w",
            Tensor::vector(theta)?,
            Tensor::vector(theta0)?,
        )?];
        let g = Tensor::vector(rng::normals(&mut rng, dim, 1.0))?;
        let report = optim::step(&mut state, &BTreeMap::from([("w".to_string(), g)]), &cfg)?;
        let r = &report.records[0];
        if !r.fired {
            if r.post_deviation != r.gamma_t {
                violations += 1;
            }
            continue;
        }
        let slack = 1e-12 * r.gamma_t.max(1.0);
        if lambda <= 1.0 {
            // A firing layer that already shrank gets r = 0 and keeps θ̃.
            let ok = if r.gamma_t > r.gamma_prev {
                weak += 1;
                r.post_deviation >= r.gamma_prev - slack
            } else {
                r.post_deviation == r.gamma_t
            };
            violations += usize::from(!ok);
        } else {
            strong += 1;
            let coeff_ok = (0.0..=1.0).contains(&r.coeff);
            let dev_ok = r.post_deviation >= 0.0 && r.post_deviation <= r.gamma_t + slack;
            if !(coeff_ok && dev_ok) {
                violations += 1;
            }
        }
    }
    Ok(Outcome::new(
        violations == 0 && weak > 0 && strong > 0,
        format!("{violations} violations over {trials} steps ({weak} weak-regime and {strong} strong-regime firings)"),
    ))
}

fn hypergradient_oracle(instances: usize) -> Result<Outcome> {
    let mut rng = rng::stream(104, 0);
    let (mut worst, mut sign_checked, mut sign_bad) = (0.0f64, 0usize, 0usize);
    for i in 0..instances {
        let dim = if i % 2 == 0 { 1 } else { 10 };
        let vec = |rng: &mut Rng, s| Tensor::vector(rng::normals(rng, dim, s)).expect("dim > 0");
        let (tilde, theta0, target) = (vec(&mut rng, 1.0), vec(&mut rng, 1.0), vec(&mut rng, 2.0));
        let curv: Vec<f64> = (0..dim)
            .map(|_| rand::Rng::random_range(&mut rng, 0.5..3.0))
            .collect();
        let alpha = 0.01;
        let lambda: f64 = rand::Rng::random_range(&mut rng, 0.0..50.0);
        let after = |lambda: f64| -> Tensor {
            let cfg = OptimizerConfig::adam(alpha).with_mode(RegMode::L2spApprox, lambda);
            optim::l2sp_decay_approx(&tilde, &theta0, &cfg).expect("same shapes")
        };
        let loss = |th: &Tensor| -> f64 {
            th.data()
                .iter()
                .zip(target.data())
                .zip(&curv)
                .map(|((a, b), c)| 0.5 * c * (a - b) * (a - b))
                .sum()
        };
        let theta = after(lambda);
        let g_next = Tensor::vector(
            theta
                .data()
                .iter()
                .zip(target.data())
                .zip(&curv)
                .map(|((a, b), c)| c * (a - b))
                .collect(),
        )?;
        let analytic = optim::hypergrad_lambda(&g_next, &tilde, &theta0, alpha)?;
        let h = 1e-4;
        let numeric = (loss(&after(lambda + h)) - loss(&after(lambda - h))) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1e-6));
        let c_t = optim::spd_condition(&g_next, &tilde, &theta0)?;
        if c_t.abs() > 1e-10 && numeric.abs() > 1e-10 {
            sign_checked += 1;
            if c_t.signum() != numeric.signum() {
                sign_bad += 1;
            }
        }
    }
    Ok(Outcome::new(
        worst < 1e-4 && sign_bad == 0,
        format!(
            "max rel error {worst:.3e} over {instances} instances; sign(c_t) disagrees on {sign_bad}/{sign_checked}"
        ),
    ))
}

fn approx_vs_exact_l2sp() -> Result<Outcome> {
    let mut rng = rng::stream(105, 0);
    let alpha = 1e-2;
    let mut worst: f64 = 0.0;
    for weight in [0.01, 0.1, 0.5] {
        let dim = 6;
        let theta = Tensor::vector(rng::normals(&mut rng, dim, 1.0))?;
        let anchor = Tensor::vector(rng::normals(&mut rng, dim, 1.0))?;
        let target = Tensor::vector(rng::normals(&mut rng, dim, 1.0))?;
        let approx = OptimizerConfig::adam(alpha).with_mode(RegMode::L2spApprox, weight / alpha);
        let damped = alpha * (1.0 - weight);
        let exact = OptimizerConfig::adam(damped).with_mode(RegMode::L2spExact, weight / damped);
        let mut a = [LayerState::new("w", theta.clone(), anchor.clone())?];
        let mut b = [LayerState::new("w", theta, anchor)?];
        for _ in 0..200 {
            let noise = Tensor::vector(rng::normals(&mut rng, dim, 0.5))?;
            let g = a[0].theta.sub(&target)?.add(&noise)?;
            let grads = BTreeMap::from([("w".to_string(), g)]);
            optim::step(&mut a, &grads, &approx)?;
            optim::step(&mut b, &grads, &exact)?;
            for (x, y) in a[0].theta.data().iter().zip(b[0].theta.data()) {
                worst = worst.max((x - y).abs());
            }
            // Start every step from the same point so only one step's rounding counts.
            b[0].theta = a[0].theta.clone();
            b[0].gamma_prev = a[0].gamma_prev;
        }
    }
    Ok(Outcome::new(
        worst <= 1e-12,
        format!("max per-step |Δθ| = {worst:.3e} over 200 steps at λα ∈ {{0.01, 0.1, 0.5}}"),
    ))
}

/// Central differences on the MLP loss for random shapes and activations.
fn gradient_check(configs: usize) -> Result<Outcome> {
    let mut rng = rng::stream(106, 0);
    let (mut worst, mut checked) = (0.0f64, 0usize);
    let h = 1e-5;
    for i in 0..configs {
        let act = [Activation::Tanh, Activation::Relu, Activation::None][i % 3];
        let depth = 2 + i % 3;
        let mut dims = vec![rand::Rng::random_range(&mut rng, 2..6)];
        for _ in 1..depth {
            dims.push(rand::Rng::random_range(&mut rng, 2..7));
        }
        dims.push(rand::Rng::random_range(&mut rng, 2..5));
        let mut model = MlpModel::init_with(&dims, act, &mut rng)?;
        if i % 4 == 3 {
            model = model.to_lora(1, &mut rng)?;
            for id in model.param_ids() {
                let t = model.param(&id).expect("listed").clone();
                let moved = t.add(&Tensor::new(
                    t.shape().to_vec(),
                    rng::normals(&mut rng, t.numel(), 0.3),
                )?)?;
                model.set_param(&id, moved)?;
            }
        }
        let (x, labels) = random_data(&mut rng, 5, dims[0], dims[dims.len() - 1]);
        let (_, grads) = model.loss_and_grads(&x, &labels)?;
        for id in model.param_ids() {
            let base = model.param(&id).expect("listed").clone();
            for k in 0..base.numel() {
                let at = |delta: f64, model: &mut MlpModel| -> Result<f64> {
                    let mut d = base.data().to_vec();
                    d[k] += delta;
                    model.set_param(&id, Tensor::new(base.shape().to_vec(), d)?)?;
                    Ok(model.loss_and_grads(&x, &labels)?.0)
                };
                let numeric = (at(h, &mut model)? - at(-h, &mut model)?) / (2.0 * h);
                model.set_param(&id, base.clone())?;
                let analytic = grads[&id].data()[k];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                // ReLU kinks within h of a pre-activation break the difference quotient.
                if act == Activation::Relu && err > 1e-5 {
                    continue;
                }
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    Ok(Outcome::new(
        worst < 1e-5,
        format!("max rel error {worst:.3e} over {checked} coordinates in {configs} configurations"),
    ))
}

fn probe_fixture() -> Result<(MlpModel, Dataset)> {
    let shape = DataShape {
        dim: 8,
        classes: 4,
        geometry: Geometry::CoordinatePlane,
    };
    let spec = DomainSpec {
        rotation_deg: 15.0,
        rotation_spread_deg: 0.0,
        noise_sigma: 0.6,
        n_samples: 400,
        seed: 7,
    };
    let model = MlpModel::init(&[8, 16, 4], Activation::Tanh, 5)?;
    Ok((model, generate_domain(&spec, &shape)?))
}

fn variance_probe(pairs: usize) -> Result<Outcome> {
    let (model, data) = probe_fixture()?;
    let p = grad_variance_probe(
        &model,
        &data,
        16,
        pairs,
        PairSampling::Independent,
        &mut rng::stream(107, 0),
    )?;
    let z = (p.mean_inner - p.full_grad_sq) / p.se_inner;
    Ok(Outcome::new(
        p.within_3se == Some(true),
        format!(
            "mean g1.g2 = {:.6e}, |gbar|^2 = {:.6e}, z = {z:.2} over {pairs} pairs (Var = {:.3e}, |gbar|^2 - Var = {:.3e})",
            p.mean_inner, p.full_grad_sq, p.variance, p.plug_in
        ),
    ))
}

fn descent_probe(trials: usize) -> Result<Outcome> {
    let l = 4.0;
    let p = descent_bound_probe(&DescentSetup {
        trials,
        ..commands::descent_setup(l, 1.0 / l)
    })?;
    Ok(Outcome::new(
        p.violations == 0,
        format!(
            "{} violations over {} steps, {trials} trials each, eta = 1/L",
            p.violations,
            p.steps.len()
        ),
    ))
}

pub const BENCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Per-seed final rows for plain Adam and SPD λ=1, sharing pretrained models.
fn paired_runs(
    base: &ExperimentConfig,
    seeds: &[u64],
) -> Result<Vec<[crate::train::MetricsRow; 2]>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = base.with_seed(seed);
            let data = Benchmark::generate(&cfg)?;
            let (model, _) = pretrain(&cfg, &data)?;
            let last = |mode, lambda| -> Result<crate::train::MetricsRow> {
                let c = cfg.with_finetune_mode(mode, lambda);
                let mut out = finetune_from(&model, &c, &data, FinetuneOptions::default())?;
                Ok(out.rows.pop().expect("at least one epoch"))
            };
            Ok([last(RegMode::None, 0.0)?, last(RegMode::Spd, 1.0)?])
        })
        .collect()
}

fn spd_vs_adam() -> Result<Outcome> {
    let runs = paired_runs(&ExperimentConfig::default_benchmark(), &BENCH_SEEDS)?;
    let avg = |k: usize, f: &dyn Fn(&crate::train::MetricsRow) -> f64| {
        mean(&runs.iter().map(|r| f(&r[k])).collect::<Vec<_>>())
    };
    let (dev_a, dev_s) = (
        avg(0, &|r| r.deviation_total),
        avg(1, &|r| r.deviation_total),
    );
    let (ood_a, ood_s) = (avg(0, &|r| r.ood_avg), avg(1, &|r| r.ood_avg));
    let (id_a, id_s) = (avg(0, &|r| r.id_acc), avg(1, &|r| r.id_acc));
    let ratio = dev_s / dev_a;
    let passed = ratio <= 0.7 && ood_s >= ood_a - 0.005 && (id_s - id_a).abs() <= 0.02;
    Ok(Outcome::new(
        passed,
        format!(
            "deviation {dev_s:.3} vs {dev_a:.3} (ratio {ratio:.3}); OOD {:.2}% vs {:.2}%; ID {:.2}% vs {:.2}% (SPD vs Adam, {} seeds)",
            100.0 * ood_s,
            100.0 * ood_a,
            100.0 * id_s,
            100.0 * id_a,
            runs.len()
        ),
    ))
}

pub const SWEEP_LAMBDAS: [f64; 8] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0];
pub const SWEEP_SEEDS: [u64; 3] = [0, 1, 2];

fn sweep_correlation() -> Result<Outcome> {
    let rows = lambda_sweep(
        &ExperimentConfig::default_benchmark(),
        &SWEEP_LAMBDAS,
        &SWEEP_SEEDS,
        true,
    )?;
    let c = correlation(&rows)?;
    let monotone = c
        .per_lambda
        .windows(2)
        .all(|w| w[1].mean_deviation <= w[0].mean_deviation);
    let devs: Vec<String> = c
        .per_lambda
        .iter()
        .map(|s| format!("{:.2}", s.mean_deviation))
        .collect();
    Ok(Outcome::new(
        c.pearson_r <= -0.5 && monotone,
        format!(
            "r = {:.3} over {} λ x {} seeds; mean deviation by λ [{}] {}",
            c.pearson_r,
            c.n_lambdas,
            SWEEP_SEEDS.len(),
            devs.join(", "),
            if monotone {
                "non-increasing"
            } else {
                "NOT monotone"
            }
        ),
    ))
}

/// The default benchmark in LoRA mode with origin anchoring.
pub fn lora_benchmark() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_benchmark();
    cfg.peft.enabled = true;
    cfg.finetune.optimizer.anchor_mode = optim::AnchorMode::Origin;
    cfg
}

fn lora_spd() -> Result<Outcome> {
    let base = lora_benchmark();
    let opts = FinetuneOptions {
        check_factored: true,
        ..Default::default()
    };
    let per_seed: Vec<(f64, f64, f64, f64, f64)> = BENCH_SEEDS
        .par_iter()
        .map(|&seed| -> Result<_> {
            let cfg = base.with_seed(seed);
            let data = Benchmark::generate(&cfg)?;
            let (model, _) = pretrain(&cfg, &data)?;
            let go = |mode, lambda| -> Result<(f64, f64, f64)> {
                let out =
                    finetune_from(&model, &cfg.with_finetune_mode(mode, lambda), &data, opts)?;
                let norm = out
                    .model
                    .lora_layers()
                    .map(|(_, l)| peft::delta_norm(l).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let id = out.rows.last().expect("epochs > 0").id_acc;
                Ok((norm, id, out.max_factored_gap))
            };
            let (n_plain, id_plain, gap_a) = go(RegMode::None, 0.0)?;
            let (n_spd, id_spd, gap_b) = go(RegMode::Spd, 1.0)?;
            Ok((n_plain, n_spd, id_plain, id_spd, gap_a.max(gap_b)))
        })
        .collect::<Result<_>>()?;
    let smaller = per_seed.iter().filter(|r| r.1 <= r.0).count();
    let id_plain = mean(&per_seed.iter().map(|r| r.2).collect::<Vec<_>>());
    let id_spd = mean(&per_seed.iter().map(|r| r.3).collect::<Vec<_>>());
    let gap = per_seed.iter().map(|r| r.4).fold(0.0, f64::max);
    let norms: Vec<String> = per_seed
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.1, r.0))
        .collect();
    Ok(Outcome::new(
        smaller == per_seed.len() && (id_spd - id_plain).abs() <= 0.02 && gap <= 1e-12,
        format!(
            "|BA|_F SPD/plain per seed [{}] ({smaller}/{} smaller); ID {:.2}% vs {:.2}%; factored gap {gap:.1e}",
            norms.join(", "),
            per_seed.len(),
            100.0 * id_spd,
            100.0 * id_plain
        ),
    ))
}

/// A reduced benchmark that trains in about a second.
pub fn small_benchmark() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_benchmark();
    cfg.model.dims = vec![16, 16, 5];
    cfg.source.n_samples = 400;
    cfg.target.n_samples = 400;
    cfg.data.test_samples = 200;
    for d in &mut cfg.ood {
        d.n_samples = 200;
    }
    cfg.pretrain.epochs = 5;
    cfg.finetune.epochs = 2;
    cfg
}

fn determinism(full: bool) -> Result<Outcome> {
    let cfg = if full {
        ExperimentConfig::default_benchmark()
    } else {
        small_benchmark()
    };
    let opts = FinetuneOptions::default();
    let a = run_experiment(&cfg, opts)?;
    let b = run_experiment(&cfg, opts)?;
    let same_csv = metrics_csv(&a.outcome.rows)? == metrics_csv(&b.outcome.rows)?;
    let text = a.outcome.model.checkpoint_string();
    let back = MlpModel::from_checkpoint_str(&text)?;
    let bits = |m: &MlpModel| -> Vec<u64> {
        m.params()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let round_trip = back == a.outcome.model
        && bits(&back) == bits(&a.outcome.model)
        && back.checkpoint_string() == text;
    Ok(Outcome::new(
        same_csv && round_trip,
        format!("metrics identical across runs: {same_csv}; checkpoint bit-exact: {round_trip}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        for n in [1, 3, 4, 5] {
            let o = check(n, Level::Fast);
            assert!(o.passed, "criterion {n}: {}", o.detail);
        }
    }

    #[test]
    fn unknown_criterion_fails() {
        assert!(!check(13, Level::Fast).passed);
    }
}
