//! Adam with anchored decay: plain Adam, AdamW-style decoupled decay, L2-SP
//! (interpolating and exact forms), and selective projection decay (SPD).
//!
//! Every trainable tensor is its own layer. A step runs Adam to get the
//! undecayed candidate `θ̃_t`, then the configured decay pulls it toward the
//! layer's anchor `θ₀`:
//!
//! | mode           | committed `θ_t`                                  |
//! |----------------|--------------------------------------------------|
//! | `none`         | `θ̃_t`                                            |
//! | `decoupled_wd` | `θ̃_t − λα·θ̃_t`                                   |
//! | `l2sp_approx`  | `θ̃_t − λα(θ̃_t − θ₀)`                              |
//! | `l2sp_exact`   | `θ̃_t − λα(θ_{t−1} − θ₀)`                          |
//! | `spd`          | `θ̃_t − k(θ̃_t − θ₀)` when `c_t < 0`, else `θ̃_t`    |
//!
//! For SPD, `c_t = −g_tᵀ(θ_{t−1} − θ₀)` uses the raw gradient and
//! `k = min(λ·r_t, 1)` with the deviation ratio
//! `r_t = max(0, γ_t − γ_{t−1}) / γ_t`, `γ_t = ‖θ̃_t − θ₀‖₂`.
//! With `λ = 1` a regularized step is exactly a projection onto the ball of
//! radius `γ_{t−1}` around the anchor.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    None,
    DecoupledWd,
    L2spApprox,
    L2spExact,
    Spd,
}

impl RegMode {
    pub fn label(self) -> &'static str {
        match self {
            RegMode::None => "adam",
            RegMode::DecoupledWd => "adamw",
            RegMode::L2spApprox => "adam-l2sp",
            RegMode::L2spExact => "adam-l2sp-exact",
            RegMode::Spd => "adam-spd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Anchor at the weights the layer had when its state was created.
    Pretrained,
    /// Anchor at the zero tensor.
    Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub reg_mode: RegMode,
    pub anchor_mode: AnchorMode,
    #[serde(default = "default_clamp")]
    pub clamp_coeff: bool,
    #[serde(default)]
    pub exclude_layers: Vec<String>,
}

fn default_clamp() -> bool {
    true
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.0,
            reg_mode: RegMode::None,
            anchor_mode: AnchorMode::Pretrained,
            clamp_coeff: true,
            exclude_layers: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn adam(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, reg_mode: RegMode, lambda: f64) -> Self {
        self.reg_mode = reg_mode;
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.beta1, self.beta2, self.eps, self.lambda]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("optimizer settings must be finite".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if matches!(self.reg_mode, RegMode::L2spApprox | RegMode::L2spExact) {
            check_interpolation_weight(self)?;
        }
        Ok(())
    }

    fn excluded(&self) -> HashSet<&str> {
        self.exclude_layers.iter().map(String::as_str).collect()
    }
}

fn check_interpolation_weight(cfg: &OptimizerConfig) -> Result<f64> {
    let w = cfg.lambda * cfg.alpha;
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!(
            "lambda*alpha = {w} must lie in [0, 1]; larger values overshoot the anchor"
        )));
    }
    Ok(w)
}

/// Per-layer optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub layer_id: String,
    pub theta: Tensor,
    pub theta0: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    /// `‖θ − θ₀‖₂` as of the end of the last completed step.
    pub gamma_prev: f64,
    pub t: u64,
}

impl LayerState {
    pub fn new(layer_id: impl Into<String>, theta: Tensor, theta0: Tensor) -> Result<Self> {
        let gamma_prev = tensor::distance(&theta, &theta0)?;
        let shape = theta.shape().to_vec();
        Ok(Self {
            layer_id: layer_id.into(),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            theta,
            theta0,
            gamma_prev,
            t: 0,
        })
    }

    /// State anchored at its own current value.
    pub fn anchored_here(layer_id: impl Into<String>, theta: Tensor) -> Self {
        let theta0 = theta.clone();
        Self::new(layer_id, theta, theta0).expect("shapes match by construction")
    }

    pub fn anchored_at_origin(layer_id: impl Into<String>, theta: Tensor) -> Self {
        let theta0 = Tensor::zeros(theta.shape());
        Self::new(layer_id, theta, theta0).expect("shapes match by construction")
    }

    pub fn with_anchor(layer_id: impl Into<String>, theta: Tensor, mode: AnchorMode) -> Self {
        match mode {
            AnchorMode::Pretrained => Self::anchored_here(layer_id, theta),
            AnchorMode::Origin => Self::anchored_at_origin(layer_id, theta),
        }
    }

    pub fn deviation(&self) -> f64 {
        tensor::distance(&self.theta, &self.theta0).expect("state shapes are kept equal")
    }

    /// Recomputes the deviation and compares it with the cached value.
    pub fn check_gamma(&self) -> Result<()> {
        let fresh = self.deviation();
        if fresh.to_bits() != self.gamma_prev.to_bits() {
            return Err(Error::Contract(format!(
                "layer `{}`: cached gamma_prev {} differs from recomputed {}",
                self.layer_id, self.gamma_prev, fresh
            )));
        }
        Ok(())
    }

    fn commit(&mut self, theta: Tensor) {
        self.gamma_prev = tensor::distance(&theta, &self.theta0).expect("same shape");
        self.theta = theta;
    }
}

/// What one step did to one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub layer_id: String,
    pub c_t: f64,
    pub fired: bool,
    /// `‖θ̃_t − θ₀‖₂`, the deviation before decay.
    pub gamma_t: f64,
    pub gamma_prev: f64,
    pub r_t: f64,
    /// Interpolation weight actually applied toward the anchor.
    pub coeff: f64,
    pub post_deviation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub records: Vec<LayerRecord>,
}

impl StepReport {
    pub fn record(&self, layer_id: &str) -> Option<&LayerRecord> {
        self.records.iter().find(|r| r.layer_id == layer_id)
    }

    pub fn fired_count(&self) -> usize {
        self.records.iter().filter(|r| r.fired).count()
    }
}

/// Adam moment update and the undecayed candidate `θ̃_t`.
///
/// Advances `state.t`, `m` and `v`; `theta` is left for the decay to commit.
pub fn adam_base_update(
    state: &mut LayerState,
    grad: &Tensor,
    cfg: &OptimizerConfig,
) -> Result<Tensor> {
    if !grad.same_shape(&state.theta) {
        return Err(Error::dim(
            "adam_base_update",
            grad.shape(),
            state.theta.shape(),
        ));
    }
    if !grad.is_finite() {
        return Err(Error::Numeric {
            layer: state.layer_id.clone(),
            detail: "gradient contains NaN or infinity".into(),
        });
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    state.m = state.m.zip_map(grad, |m, g| b1 * m + (1.0 - b1) * g)?;
    state.v = state.v.zip_map(grad, |v, g| b2 * v + (1.0 - b2) * g * g)?;
    let exp = i32::try_from(state.t).unwrap_or(i32::MAX);
    let bc1 = 1.0 - b1.powi(exp);
    let bc2 = 1.0 - b2.powi(exp);
    let (alpha, eps) = (cfg.alpha, cfg.eps);
    let data = state
        .theta
        .data()
        .iter()
        .zip(state.m.data().iter().zip(state.v.data()))
        .map(|(&th, (&m, &v))| {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            th - alpha * m_hat / (v_hat.sqrt() + eps)
        })
        .collect();
    Tensor::new(state.theta.shape().to_vec(), data)
}

/// Selection condition `c_t = −gᵀ(θ_{t−1} − θ₀)`; regularization fires when it
/// is strictly negative.
pub fn spd_condition(grad: &Tensor, theta_prev: &Tensor, theta0: &Tensor) -> Result<f64> {
    if !grad.same_shape(theta_prev) || !grad.same_shape(theta0) {
        return Err(Error::dim(
            "spd_condition",
            grad.shape(),
            theta_prev.shape(),
        ));
    }
    let inner: f64 = grad
        .data()
        .iter()
        .zip(theta_prev.data().iter().zip(theta0.data()))
        .map(|(&g, (&p, &a))| g * (p - a))
        .sum();
    Ok(-inner)
}

/// `max(0, γ_t − γ_prev) / γ_t`, defined as 0 when `γ_t = 0`.
pub fn deviation_ratio(gamma_t: f64, gamma_prev: f64) -> Result<f64> {
    if gamma_t < 0.0 || gamma_prev < 0.0 || gamma_t.is_nan() || gamma_prev.is_nan() {
        return Err(Error::Contract(format!(
            "deviations must be non-negative, got gamma_t={gamma_t}, gamma_prev={gamma_prev}"
        )));
    }
    if gamma_t == 0.0 {
        return Ok(0.0);
    }
    Ok(((gamma_t - gamma_prev).max(0.0) / gamma_t).min(1.0))
}

/// Result of the selective decay on one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdOutcome {
    pub theta: Tensor,
    pub fired: bool,
    pub gamma_t: f64,
    pub r_t: f64,
    pub coeff: f64,
}

/// `θ₀ + (1 − w)(θ̃ − θ₀)`; `w = 0` returns `θ̃` untouched.
fn interpolate_to_anchor(theta_tilde: &Tensor, theta0: &Tensor, w: f64) -> Result<Tensor> {
    if w == 0.0 {
        return Ok(theta_tilde.clone());
    }
    let keep = 1.0 - w;
    theta_tilde.zip_map(theta0, |x, a| a + keep * (x - a))
}

pub fn spd_update(
    theta_tilde: &Tensor,
    state: &LayerState,
    c_t: f64,
    cfg: &OptimizerConfig,
) -> Result<SpdOutcome> {
    let gamma_t = tensor::distance(theta_tilde, &state.theta0)?;
    if c_t >= 0.0 || c_t.is_nan() {
        return Ok(SpdOutcome {
            theta: theta_tilde.clone(),
            fired: false,
            gamma_t,
            r_t: 0.0,
            coeff: 0.0,
        });
    }
    let r_t = deviation_ratio(gamma_t, state.gamma_prev)?;
    let raw = cfg.lambda * r_t;
    let coeff = if cfg.clamp_coeff { raw.min(1.0) } else { raw };
    let theta = interpolate_to_anchor(theta_tilde, &state.theta0, coeff)?;
    Ok(SpdOutcome {
        theta,
        fired: true,
        gamma_t,
        r_t,
        coeff,
    })
}

/// Interpolating L2-SP decay, `θ̃ − λα(θ̃ − θ₀)`.
pub fn l2sp_decay_approx(
    theta_tilde: &Tensor,
    theta0: &Tensor,
    cfg: &OptimizerConfig,
) -> Result<Tensor> {
    let w = check_interpolation_weight(cfg)?;
    interpolate_to_anchor(theta_tilde, theta0, w)
}

/// L2-SP decay measured from the pre-update parameters, `θ̃ − λα(θ_{t−1} − θ₀)`.
pub fn l2sp_decay_exact(
    theta_tilde: &Tensor,
    theta_prev: &Tensor,
    theta0: &Tensor,
    cfg: &OptimizerConfig,
) -> Result<Tensor> {
    let w = check_interpolation_weight(cfg)?;
    if !theta_prev.same_shape(theta0) {
        return Err(Error::dim(
            "l2sp_decay_exact",
            theta_prev.shape(),
            theta0.shape(),
        ));
    }
    if w == 0.0 {
        return Ok(theta_tilde.clone());
    }
    let displacement = theta_prev.sub(theta0)?;
    tensor::axpy(-w, &displacement, theta_tilde)
}

/// AdamW-style shrink toward the origin, `θ̃ − λα·θ̃`.
pub fn decoupled_weight_decay(theta_tilde: &Tensor, cfg: &OptimizerConfig) -> Tensor {
    let w = cfg.lambda * cfg.alpha;
    if w == 0.0 {
        return theta_tilde.clone();
    }
    theta_tilde.scale(1.0 - w)
}

/// Analytic derivative of the loss after one interpolating L2-SP step with
/// respect to λ: `α · (−g_{t+1}ᵀ(θ̃_t − θ₀))`.
pub fn hypergrad_lambda(
    grad_next: &Tensor,
    theta_tilde: &Tensor,
    theta0: &Tensor,
    alpha: f64,
) -> Result<f64> {
    Ok(alpha * spd_condition(grad_next, theta_tilde, theta0)?)
}

/// One optimizer step over all layers.
///
/// Layers listed in `cfg.exclude_layers` take the plain Adam update and get
/// no record; they may be absent from `grads`. Every other layer must have a
/// gradient.
pub fn step(
    states: &mut [LayerState],
    grads: &BTreeMap<String, Tensor>,
    cfg: &OptimizerConfig,
) -> Result<StepReport> {
    cfg.validate()?;
    let excluded = cfg.excluded();
    for s in states.iter() {
        if !excluded.contains(s.layer_id.as_str()) && !grads.contains_key(&s.layer_id) {
            return Err(Error::Contract(format!(
                "no gradient for layer `{}`",
                s.layer_id
            )));
        }
    }

    let mut report = StepReport::default();
    for state in states.iter_mut() {
        debug_assert!(state.check_gamma().is_ok(), "stale gamma_prev");
        let Some(grad) = grads.get(&state.layer_id) else {
            continue;
        };
        if excluded.contains(state.layer_id.as_str()) {
            let theta = adam_base_update(state, grad, cfg)?;
            state.commit(theta);
            continue;
        }
        let gamma_prev = state.gamma_prev;
        let c_t = spd_condition(grad, &state.theta, &state.theta0)?;
        let theta_tilde = adam_base_update(state, grad, cfg)?;
        let w = cfg.lambda * cfg.alpha;
        let (theta, fired, gamma_t, r_t, coeff) = match cfg.reg_mode {
            RegMode::None => {
                let g = tensor::distance(&theta_tilde, &state.theta0)?;
                (theta_tilde, false, g, 0.0, 0.0)
            }
            RegMode::DecoupledWd => {
                let g = tensor::distance(&theta_tilde, &state.theta0)?;
                (
                    decoupled_weight_decay(&theta_tilde, cfg),
                    w > 0.0,
                    g,
                    0.0,
                    w,
                )
            }
            RegMode::L2spApprox => {
                let g = tensor::distance(&theta_tilde, &state.theta0)?;
                let th = l2sp_decay_approx(&theta_tilde, &state.theta0, cfg)?;
                (th, w > 0.0, g, 0.0, w)
            }
            RegMode::L2spExact => {
                let g = tensor::distance(&theta_tilde, &state.theta0)?;
                let th = l2sp_decay_exact(&theta_tilde, &state.theta, &state.theta0, cfg)?;
                (th, w > 0.0, g, 0.0, w)
            }
            RegMode::Spd => {
                let out = spd_update(&theta_tilde, state, c_t, cfg)?;
                (out.theta, out.fired, out.gamma_t, out.r_t, out.coeff)
            }
        };
        if !theta.is_finite() {
            return Err(Error::Numeric {
                layer: state.layer_id.clone(),
                detail: format!("update produced non-finite parameters at step {}", state.t),
            });
        }
        state.commit(theta);
        report.records.push(LayerRecord {
            layer_id: state.layer_id.clone(),
            c_t,
            fired,
            gamma_t,
            gamma_prev,
            r_t,
            coeff,
            post_deviation: state.gamma_prev,
        });
    }
    Ok(report)
}
