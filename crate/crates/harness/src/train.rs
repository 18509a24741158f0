//! Pretraining, fine-tuning and the LP-FT and WiSE-FT baselines.
//!
//! Every random draw comes from `rng::stream(cfg.seed, STREAM_*)`, and each
//! domain's sample seed is `rng::substream(cfg.seed, spec.seed)`. Runs that
//! differ only in the fine-tuning optimizer therefore see the same data, the
//! same pretrained model and the same minibatch order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use spd_core::models::{self, MlpModel, Snapshot};
use spd_core::optim::{self, AnchorMode, LayerState, OptimizerConfig, RegMode, StepReport};
use spd_core::peft::{self, AnchorPolicy};
use spd_core::rng::{self, Rng};
use spd_core::Tensor;

use crate::config::{ExperimentConfig, HeadPolicy};
use crate::data::{generate_domain, Dataset, DomainSpec};
use crate::error::{HarnessError, Result};

pub const STREAM_INIT: u64 = 1;
pub const STREAM_PRETRAIN: u64 = 2;
pub const STREAM_HEAD: u64 = 3;
pub const STREAM_ADAPTER: u64 = 4;
pub const STREAM_FINETUNE: u64 = 5;
pub const STREAM_PROBE_STAGE: u64 = 6;
pub const STREAM_PROBES: u64 = 7;

/// All datasets of one experiment.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
    pub ood: Vec<Dataset>,
}

fn seeded(spec: &DomainSpec, run_seed: u64) -> DomainSpec {
    DomainSpec {
        seed: rng::substream(run_seed, spec.seed),
        ..spec.clone()
    }
}

impl Benchmark {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let shape = cfg.shape();
        let target = seeded(&cfg.target, cfg.seed);
        Ok(Self {
            source: generate_domain(&seeded(&cfg.source, cfg.seed), &shape)?,
            target_test: generate_domain(&target.held_out(cfg.data.test_samples), &shape)?,
            target_train: generate_domain(&target, &shape)?,
            ood: cfg
                .ood
                .iter()
                .map(|d| generate_domain(&seeded(d, cfg.seed), &shape))
                .collect::<Result<_>>()?,
        })
    }
}

/// One row of the per-epoch metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub optimizer: String,
    pub lambda: f64,
    pub epoch: usize,
    pub train_loss: f64,
    pub id_acc: f64,
    pub ood_acc: Vec<f64>,
    pub ood_avg: f64,
    pub deviation_total: f64,
    /// `(layer_id, ‖θ − θ₀‖₂)` for every tensor in the deviation metric.
    pub layer_deviations: Vec<(String, f64)>,
}

impl MetricsRow {
    /// Checks that the aggregate columns agree with their components.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        let avg = self.ood_acc.iter().sum::<f64>() / self.ood_acc.len() as f64;
        if (avg - self.ood_avg).abs() > 1e-9 * avg.abs().max(1.0) {
            return Err(format!(
                "ood_avg {} but mean of columns {}",
                self.ood_avg, avg
            ));
        }
        let total = self
            .layer_deviations
            .iter()
            .map(|(_, d)| d * d)
            .sum::<f64>()
            .sqrt();
        if (total - self.deviation_total).abs() > 1e-9 * total.max(1e-300) {
            return Err(format!(
                "deviation_total {} but layers give {}",
                self.deviation_total, total
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: MlpModel,
    pub rows: Vec<MetricsRow>,
    /// One report per optimizer step, in order; empty unless requested.
    pub reports: Vec<StepReport>,
    /// Largest gap between factored and materialized adapter outputs seen at
    /// an epoch end; 0 unless requested.
    pub max_factored_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FinetuneOptions {
    pub record_steps: bool,
    /// Compare the factored and materialized forward of every adapter layer
    /// on the target test inputs after each epoch.
    pub check_factored: bool,
}

/// Trains `states` (a subset of the model's tensors) for one epoch.
#[allow(clippy::too_many_arguments)]
fn train_epoch(
    model: &mut MlpModel,
    states: &mut [LayerState],
    data: &Dataset,
    batch_size: usize,
    opt: &OptimizerConfig,
    rng: &mut Rng,
    stage: &'static str,
    step: &mut usize,
    mut reports: Option<&mut Vec<StepReport>>,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    for rows in order.chunks(batch_size) {
        let (x, labels) = data.batch(rows);
        let (loss, grads) = model.loss_and_grads(&x, &labels)?;
        *step += 1;
        if !loss.is_finite() {
            return Err(HarnessError::Diverged {
                stage,
                step: *step,
                loss,
            });
        }
        loss_sum += loss * rows.len() as f64;
        let report = optim::step(states, &grads, opt).map_err(|e| match e {
            spd_core::Error::Numeric { .. } => HarnessError::Diverged {
                stage,
                step: *step,
                loss,
            },
            other => other.into(),
        })?;
        model.load_states(states)?;
        if let Some(r) = reports.as_deref_mut() {
            r.push(report);
        }
    }
    Ok(loss_sum / data.len() as f64)
}

/// Trains a fresh model on the source domain with the pretraining optimizer
/// and returns it with its snapshot.
pub fn pretrain(cfg: &ExperimentConfig, data: &Benchmark) -> Result<(MlpModel, Snapshot)> {
    let mut model = MlpModel::init_with(
        &cfg.model.dims,
        cfg.model.activation,
        &mut rng::stream(cfg.seed, STREAM_INIT),
    )?;
    let mut states: Vec<LayerState> = model
        .params()
        .into_iter()
        .map(|(id, t)| LayerState::anchored_here(id, t.clone()))
        .collect();
    let mut shuffle = rng::stream(cfg.seed, STREAM_PRETRAIN);
    let mut step = 0;
    for _ in 0..cfg.pretrain.epochs {
        train_epoch(
            &mut model,
            &mut states,
            &data.source,
            cfg.pretrain.batch_size,
            &cfg.pretrain.optimizer,
            &mut shuffle,
            "pretraining",
            &mut step,
            None,
        )?;
    }
    let anchor = models::snapshot_anchor(&model);
    Ok((model, anchor))
}

/// Applies the head policy and PEFT conversion to a pretrained model and
/// returns the model fine-tuning starts from with its anchor.
///
/// The anchor is the starting model itself in `pretrained` anchor mode and
/// the zero tensor in `origin` mode. A re-initialized head is anchored at its
/// fresh init.
pub fn prepare_finetune(
    pretrained: &MlpModel,
    cfg: &ExperimentConfig,
) -> Result<(MlpModel, Snapshot)> {
    let mut model = pretrained.clone();
    if cfg.finetune.head == HeadPolicy::Reinit {
        model.reinit_head(&mut rng::stream(cfg.seed, STREAM_HEAD));
    }
    if cfg.peft.enabled {
        model = model.to_lora(cfg.peft.rank, &mut rng::stream(cfg.seed, STREAM_ADAPTER))?;
    }
    let anchor = match cfg.finetune.optimizer.anchor_mode {
        AnchorMode::Pretrained => models::snapshot_anchor(&model),
        AnchorMode::Origin => Snapshot::new(
            model
                .params()
                .into_iter()
                .map(|(id, t)| (id, Tensor::zeros(t.shape())))
                .collect(),
        ),
    };
    Ok((model, anchor))
}

/// Tensors counted in `deviation_total`: everything trainable except a
/// re-initialized head.
pub fn metric_ids(model: &MlpModel, cfg: &ExperimentConfig) -> Vec<String> {
    let head = if cfg.finetune.head == HeadPolicy::Reinit && !cfg.peft.enabled {
        model.head_ids()
    } else {
        Vec::new()
    };
    model
        .param_ids()
        .into_iter()
        .filter(|id| !head.contains(id))
        .collect()
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    let opt = &cfg.finetune.optimizer;
    let mut id = format!(
        "{}-lambda{}-seed{}",
        opt.reg_mode.label(),
        opt.lambda,
        cfg.seed
    );
    if cfg.peft.enabled {
        id.push_str(&format!("-lora{}", cfg.peft.rank));
    }
    if cfg.finetune.lp_epochs > 0 {
        id.push_str("-lpft");
    }
    id
}

/// `(id_acc, ood_acc, layer_deviations)`.
pub type Evaluation = (f64, Vec<f64>, Vec<(String, f64)>);

/// Accuracies and deviations of `model` against `anchor`.
pub fn evaluate(
    model: &MlpModel,
    anchor: &Snapshot,
    ids: &[String],
    data: &Benchmark,
) -> Result<Evaluation> {
    let id_acc = model.accuracy(&data.target_test.x, &data.target_test.labels)?;
    let ood = data
        .ood
        .iter()
        .map(|d| model.accuracy(&d.x, &d.labels))
        .collect::<spd_core::Result<Vec<_>>>()?;
    let devs = models::layer_deviations(model, anchor)?
        .into_iter()
        .filter(|(id, _)| ids.contains(id))
        .collect();
    Ok((id_acc, ood, devs))
}

fn row(
    cfg: &ExperimentConfig,
    epoch: usize,
    train_loss: f64,
    (id_acc, ood_acc, layer_deviations): Evaluation,
) -> MetricsRow {
    let opt = &cfg.finetune.optimizer;
    MetricsRow {
        run_id: run_id(cfg),
        seed: cfg.seed,
        optimizer: opt.reg_mode.label().to_string(),
        lambda: opt.lambda,
        epoch,
        train_loss,
        id_acc,
        ood_avg: ood_acc.iter().sum::<f64>() / ood_acc.len() as f64,
        ood_acc,
        deviation_total: layer_deviations
            .iter()
            .map(|(_, d)| d * d)
            .sum::<f64>()
            .sqrt(),
        layer_deviations,
    }
}

fn states_for(model: &MlpModel, anchor: &Snapshot, ids: &[String]) -> Result<Vec<LayerState>> {
    ids.iter()
        .map(|id| {
            let theta = model.param(id).expect("ids come from the model").clone();
            let theta0 = anchor
                .get(id)
                .ok_or_else(|| HarnessError::Config(format!("anchor has no tensor for `{id}`")))?;
            Ok(LayerState::new(id.clone(), theta, theta0.clone())?)
        })
        .collect()
}

/// Adapter states, anchored per the optimizer's anchor mode.
fn adapter_states(model: &MlpModel, cfg: &ExperimentConfig) -> Result<Vec<LayerState>> {
    let policy = AnchorPolicy {
        mode: cfg.finetune.optimizer.anchor_mode,
    };
    let mut out = Vec::new();
    for (i, layer) in model.lora_layers() {
        out.extend(peft::adapter_states(layer, policy, &format!("L{i}"))?);
    }
    Ok(out)
}

/// Max abs difference between `lora_forward` and `W_eff x` over the adapter
/// layers, each fed the target test inputs projected to its input width.
fn factored_gap(model: &MlpModel, data: &Benchmark) -> Result<f64> {
    let x = data.target_test.x.transpose();
    let mut gap: f64 = 0.0;
    for (_, layer) in model.lora_layers() {
        let n = layer.w0().shape()[1];
        let (d, b) = x.dims2();
        let cols: Vec<f64> = (0..n * b)
            .map(|k| x.data()[(k / b) % d * b + k % b])
            .collect();
        let input = Tensor::matrix(n, b, cols)?;
        let factored = peft::lora_forward(layer, &input)?;
        let dense = layer.effective_weight().matmul(&input)?;
        for (a, c) in factored.data().iter().zip(dense.data()) {
            gap = gap.max((a - c).abs());
        }
    }
    Ok(gap)
}

#[allow(clippy::too_many_arguments)]
fn finetune_stage(
    model: &mut MlpModel,
    states: &mut [LayerState],
    anchor: &Snapshot,
    cfg: &ExperimentConfig,
    opt: &OptimizerConfig,
    epochs: usize,
    first_epoch: usize,
    rng: &mut Rng,
    data: &Benchmark,
    opts: FinetuneOptions,
    out: &mut FinetuneOutcome,
) -> Result<()> {
    let ids = metric_ids(model, cfg);
    let mut step = out.reports.len();
    for e in 0..epochs {
        let loss = train_epoch(
            model,
            states,
            &data.target_train,
            cfg.finetune.batch_size,
            opt,
            rng,
            "fine-tuning",
            &mut step,
            opts.record_steps.then_some(&mut out.reports),
        )?;
        let eval = evaluate(model, anchor, &ids, data)?;
        out.rows.push(row(cfg, first_epoch + e, loss, eval));
        if opts.check_factored {
            out.max_factored_gap = out.max_factored_gap.max(factored_gap(model, data)?);
        }
    }
    Ok(())
}

/// Fine-tunes every trainable tensor of `model` on the target domain with
/// the configured optimizer, logging one metrics row per epoch.
pub fn finetune(
    model: MlpModel,
    anchor: &Snapshot,
    cfg: &ExperimentConfig,
    data: &Benchmark,
    opts: FinetuneOptions,
) -> Result<FinetuneOutcome> {
    let mut model = model;
    let mut states = if cfg.peft.enabled {
        adapter_states(&model, cfg)?
    } else {
        states_for(&model, anchor, &model.param_ids())?
    };
    let mut out = FinetuneOutcome {
        model: model.clone(),
        rows: Vec::new(),
        reports: Vec::new(),
        max_factored_gap: 0.0,
    };
    let mut shuffle = rng::stream(cfg.seed, STREAM_FINETUNE);
    finetune_stage(
        &mut model,
        &mut states,
        anchor,
        cfg,
        &cfg.finetune.optimizer,
        cfg.finetune.epochs,
        1,
        &mut shuffle,
        data,
        opts,
        &mut out,
    )?;
    out.model = model;
    Ok(out)
}

/// LP-FT: `lp_epochs` of plain Adam on the head alone, then full fine-tuning
/// with the configured optimizer. The head is re-anchored at its probed
/// value for the second stage; epochs are numbered across both stages.
pub fn linear_probe_then_finetune(
    model: MlpModel,
    anchor: &Snapshot,
    cfg: &ExperimentConfig,
    data: &Benchmark,
    opts: FinetuneOptions,
) -> Result<FinetuneOutcome> {
    let mut model = model;
    let head = model.head_ids();
    let mut out = FinetuneOutcome {
        model: model.clone(),
        rows: Vec::new(),
        reports: Vec::new(),
        max_factored_gap: 0.0,
    };
    let probe_opt = OptimizerConfig {
        reg_mode: RegMode::None,
        lambda: 0.0,
        exclude_layers: Vec::new(),
        ..cfg.finetune.optimizer.clone()
    };
    let mut head_states = states_for(&model, anchor, &head)?;
    finetune_stage(
        &mut model,
        &mut head_states,
        anchor,
        cfg,
        &probe_opt,
        cfg.finetune.lp_epochs,
        1,
        &mut rng::stream(cfg.seed, STREAM_PROBE_STAGE),
        data,
        opts,
        &mut out,
    )?;

    let mut stage2_anchor: BTreeMap<String, Tensor> = anchor
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    for id in &head {
        stage2_anchor.insert(id.clone(), model.param(id).expect("head id").clone());
    }
    let stage2_anchor = Snapshot::new(stage2_anchor);
    let mut states = states_for(&model, &stage2_anchor, &model.param_ids())?;
    finetune_stage(
        &mut model,
        &mut states,
        anchor,
        cfg,
        &cfg.finetune.optimizer,
        cfg.finetune.epochs,
        cfg.finetune.lp_epochs + 1,
        &mut rng::stream(cfg.seed, STREAM_FINETUNE),
        data,
        opts,
        &mut out,
    )?;
    out.model = model;
    Ok(out)
}

/// WiSE-FT weight interpolation `βθ + (1 − β)θ₀`, tensor by tensor.
pub fn wise_interpolate(theta: &Snapshot, theta0: &Snapshot, beta: f64) -> Result<Snapshot> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(HarnessError::Config(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    let mut out = BTreeMap::new();
    for (id, t) in theta.iter() {
        let t0 = theta0
            .get(id)
            .ok_or_else(|| HarnessError::Config(format!("anchor has no tensor for `{id}`")))?;
        let mixed = if beta == 1.0 {
            t.clone()
        } else if beta == 0.0 {
            t0.clone()
        } else {
            t.zip_map(t0, |a, b| beta * a + (1.0 - beta) * b)?
        };
        out.insert(id.to_string(), mixed);
    }
    Ok(Snapshot::new(out))
}

/// Overwrites the model's trainable tensors with those in `snapshot`.
pub fn load_snapshot(model: &mut MlpModel, snapshot: &Snapshot) -> Result<()> {
    for (id, t) in snapshot.iter() {
        model.set_param(id, t.clone())?;
    }
    Ok(())
}

/// Everything `run` produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub pretrained: MlpModel,
    pub outcome: FinetuneOutcome,
}

/// Pretrains, prepares and fine-tunes one configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig, opts: FinetuneOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let data = Benchmark::generate(cfg)?;
    let (pretrained, _) = pretrain(cfg, &data)?;
    let outcome = finetune_from(&pretrained, cfg, &data, opts)?;
    Ok(RunOutput {
        pretrained,
        outcome,
    })
}

/// The fine-tuning half of [`run_experiment`], for callers that reuse a
/// pretrained model across optimizer settings.
pub fn finetune_from(
    pretrained: &MlpModel,
    cfg: &ExperimentConfig,
    data: &Benchmark,
    opts: FinetuneOptions,
) -> Result<FinetuneOutcome> {
    let (model, anchor) = prepare_finetune(pretrained, cfg)?;
    if cfg.finetune.lp_epochs > 0 {
        linear_probe_then_finetune(model, &anchor, cfg, data, opts)
    } else {
        finetune(model, &anchor, cfg, data, opts)
    }
}
