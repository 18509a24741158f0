//! Statistical probes of two stochastic-gradient facts: the inner product of
//! independent minibatch gradients, and the one-step descent bound for SGD.

use rand::seq::index;
use serde::Serialize;
use spd_core::models::MlpModel;
use spd_core::rng::{self, Rng};

use crate::data::Dataset;
use crate::error::{HarnessError, Result};
use crate::stats::{mean, standard_error};

/// How the two gradients of a pair are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSampling {
    /// Two minibatches drawn independently (each without replacement).
    Independent,
    /// The same minibatch twice, so `g₁ = g₂`.
    SameBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceProbe {
    pub n_pairs: usize,
    pub batch_size: usize,
    /// Mean of `g₁ᵀg₂` over the pairs.
    pub mean_inner: f64,
    pub se_inner: f64,
    /// `‖ḡ‖²` from the full-batch gradient.
    pub full_grad_sq: f64,
    /// Mean of `‖g − ḡ‖²` over every sampled minibatch gradient.
    pub variance: f64,
    /// `‖ḡ‖² − Var(g)`.
    pub plug_in: f64,
    /// `|mean_inner − ‖ḡ‖²| ≤ 3·se_inner`; `None` when pairs are not independent.
    pub within_3se: Option<bool>,
}

fn flat_grad(model: &MlpModel, data: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    let (x, labels) = data.batch(rows);
    let (_, grads) = model.loss_and_grads(&x, &labels)?;
    Ok(grads.into_values().flat_map(|t| t.into_data()).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Samples `n_pairs` minibatch gradient pairs at the model's current weights.
pub fn grad_variance_probe(
    model: &MlpModel,
    data: &Dataset,
    batch_size: usize,
    n_pairs: usize,
    sampling: PairSampling,
    rng: &mut Rng,
) -> Result<VarianceProbe> {
    if batch_size == 0 || batch_size > data.len() {
        return Err(HarnessError::Config(format!(
            "batch size must lie in [1, {}], got {batch_size}",
            data.len()
        )));
    }
    if n_pairs == 0 {
        return Err(HarnessError::Config("n_pairs must be positive".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let g_bar = flat_grad(model, data, &all)?;
    let full_grad_sq = dot(&g_bar, &g_bar);

    let draw = |rng: &mut Rng| -> Result<Vec<f64>> {
        let rows = index::sample(rng, data.len(), batch_size).into_vec();
        flat_grad(model, data, &rows)
    };
    let spread = |g: &[f64]| -> f64 { g.iter().zip(&g_bar).map(|(a, b)| (a - b) * (a - b)).sum() };

    let mut inners = Vec::with_capacity(n_pairs);
    let mut spreads = Vec::with_capacity(2 * n_pairs);
    for _ in 0..n_pairs {
        let g1 = draw(rng)?;
        let g2 = match sampling {
            PairSampling::Independent => draw(rng)?,
            PairSampling::SameBatch => g1.clone(),
        };
        inners.push(dot(&g1, &g2));
        spreads.push(spread(&g1));
        if sampling == PairSampling::Independent {
            spreads.push(spread(&g2));
        }
    }
    let mean_inner = mean(&inners);
    let se_inner = standard_error(&inners);
    let variance = mean(&spreads);
    Ok(VarianceProbe {
        n_pairs,
        batch_size,
        mean_inner,
        se_inner,
        full_grad_sq,
        variance,
        plug_in: full_grad_sq - variance,
        within_3se: (sampling == PairSampling::Independent)
            .then(|| (mean_inner - full_grad_sq).abs() <= 3.0 * se_inner + 1e-12 * full_grad_sq),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescentStep {
    pub step: usize,
    /// Monte-Carlo mean of `f(θ_{k+1}) − f(θ_k)`.
    pub mean_change: f64,
    pub se: f64,
    /// `−η(1 − ηL/2)‖∇f‖² + (η²L/2)·Var(g)`.
    pub bound: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescentProbe {
    pub violations: usize,
    pub steps: Vec<DescentStep>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentSetup {
    pub dim: usize,
    /// Smoothness constant: the largest Hessian eigenvalue.
    pub l: f64,
    pub eta: f64,
    pub steps: usize,
    pub trials: usize,
    /// Per-coordinate standard deviation of the additive gradient noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Checks the SGD descent bound on `f(θ) = ½ Σ hᵢθᵢ²` with `hᵢ` evenly
/// spaced in `[L/10, L]`.
///
/// At each iterate `θ_k`, `trials` noisy steps estimate `E[f(θ_{k+1})] −
/// f(θ_k)`; the iterate then advances along the first trial. A step counts
/// as a violation when the mean exceeds the bound by more than three
/// standard errors.
pub fn descent_bound_probe(setup: &DescentSetup) -> Result<DescentProbe> {
    let DescentSetup {
        dim,
        l,
        eta,
        steps,
        trials,
        noise_sigma,
        seed,
    } = *setup;
    if !(l > 0.0 && l.is_finite()) || dim == 0 || trials < 2 {
        return Err(HarnessError::Config(format!(
            "need L > 0, dim ≥ 1 and ≥ 2 trials (L = {l}, dim = {dim}, trials = {trials})"
        )));
    }
    if !(eta > 0.0 && eta <= 2.0 / l) {
        return Err(HarnessError::Config(format!(
            "eta must lie in (0, 2/L], got {eta} with L = {l}"
        )));
    }
    if noise_sigma.is_nan() || noise_sigma < 0.0 {
        return Err(HarnessError::Config(format!(
            "noise must be >= 0, got {noise_sigma}"
        )));
    }
    let h: Vec<f64> = (0..dim)
        .map(|i| {
            if dim == 1 {
                l
            } else {
                l / 10.0 + (l - l / 10.0) * i as f64 / (dim - 1) as f64
            }
        })
        .collect();
    let f = |theta: &[f64]| -> f64 {
        0.5 * theta.iter().zip(&h).map(|(t, hi)| hi * t * t).sum::<f64>()
    };
    let variance = dim as f64 * noise_sigma * noise_sigma;

    let mut init = rng::stream(seed, 0);
    let mut theta: Vec<f64> = rng::normals(&mut init, dim, 1.0);
    let mut noise = rng::stream(seed, 1);
    let mut out = DescentProbe {
        violations: 0,
        steps: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let grad: Vec<f64> = theta.iter().zip(&h).map(|(t, hi)| hi * t).collect();
        let grad_sq = dot(&grad, &grad);
        let f0 = f(&theta);
        let mut changes = Vec::with_capacity(trials);
        let mut next = theta.clone();
        for trial in 0..trials {
            let candidate: Vec<f64> = theta
                .iter()
                .zip(&grad)
                .map(|(t, g)| t - eta * (g + noise_sigma * rng::normal(&mut noise)))
                .collect();
            changes.push(f(&candidate) - f0);
            if trial == 0 {
                next = candidate;
            }
        }
        let mean_change = mean(&changes);
        let se = standard_error(&changes);
        let bound = -eta * (1.0 - eta * l / 2.0) * grad_sq + eta * eta * l / 2.0 * variance;
        let slack = 3.0 * se + 1e-12 * f0.abs().max(f64::MIN_POSITIVE);
        let violated = mean_change - bound > slack;
        out.violations += usize::from(violated);
        out.steps.push(DescentStep {
            step: k + 1,
            mean_change,
            se,
            bound,
            violated,
        });
        theta = next;
    }
    Ok(out)
}
