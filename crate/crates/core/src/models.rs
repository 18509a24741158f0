//! Small layered classifiers.
//!
//! Layer `i` of a model exposes its trainable tensors under the ids
//! `L{i}.weight` and `L{i}.bias` (dense) or `L{i}.lora_up` and
//! `L{i}.lora_down` (adapter). Weights are stored `[out × in]` and inputs are
//! row batches `[B × d]`, so a dense layer computes `xWᵀ + b`.
//!
//! # Checkpoint format
//!
//! A checkpoint is UTF-8 text, one record per line:
//!
//! ```text
//! spd-checkpoint 1
//! model <input_dim> <classes> <n_layers>
//! layer <index> dense <activation>
//! layer <index> lora <activation> <rank>
//! tensor <name> <extent>... : <value> <value> ...
//! ```
//!
//! Each `layer` line is followed by its tensors: `L{i}.weight` and
//! `L{i}.bias` for dense layers; `L{i}.w0`, `L{i}.lora_up`,
//! `L{i}.lora_down` and `L{i}.bias` for adapter layers. Values are written
//! in row-major order with Rust's shortest round-trip float formatting, so
//! loading reproduces every bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::optim::LayerState;
use crate::peft::LoraLayer;
use crate::rng::{self, Rng};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::None => "none",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "none" => Ok(Activation::None),
            other => Err(Error::Input(format!("unknown activation `{other}`"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::None => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// An adapter layer. Its bias belongs to the frozen base and is not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub lora: LoraLayer,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Dense(Dense),
    Lora(Adapted),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl Layer {
    fn out_dim(&self) -> usize {
        match &self.kind {
            LayerKind::Dense(d) => d.weight.shape()[0],
            LayerKind::Lora(a) => a.lora.w0().shape()[0],
        }
    }

    fn in_dim(&self) -> usize {
        match &self.kind {
            LayerKind::Dense(d) => d.weight.shape()[1],
            LayerKind::Lora(a) => a.lora.w0().shape()[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    input_dim: usize,
    classes: usize,
}

/// Trainable tensors by layer id, deep-copied.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(BTreeMap<String, Tensor>);

impl Snapshot {
    pub fn new(tensors: BTreeMap<String, Tensor>) -> Self {
        Self(tensors)
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.0.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn init_std(activation: Activation, fan_in: usize, fan_out: usize) -> f64 {
    match activation {
        Activation::Relu => (2.0 / fan_in as f64).sqrt(),
        Activation::Tanh | Activation::None => (2.0 / (fan_in + fan_out) as f64).sqrt(),
    }
}

fn fresh_dense(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut Rng) -> Dense {
    let std = init_std(activation, fan_in, fan_out);
    Dense {
        weight: Tensor::matrix(fan_out, fan_in, rng::normals(rng, fan_out * fan_in, std))
            .expect("extents are positive"),
        bias: Tensor::zeros(&[fan_out]),
    }
}

impl MlpModel {
    /// Hidden layers use `activation`; the output layer is linear.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Self::init_with(dims, activation, &mut rng::stream(seed, 0))
    }

    pub fn init_with(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "a model needs at least input and output dims, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dims must be positive, got {dims:?}"
            )));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::None
                } else {
                    activation
                };
                Layer {
                    kind: LayerKind::Dense(fresh_dense(dims[i], dims[i + 1], act, rng)),
                    activation: act,
                }
            })
            .collect();
        Ok(Self {
            layers,
            input_dim: dims[0],
            classes: dims[n],
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let (Some(first), Some(last)) = (layers.first(), layers.last()) else {
            return Err(Error::Config("a model needs at least one layer".into()));
        };
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Config(format!(
                    "layer dims do not chain: {} outputs feed {} inputs",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        for l in &layers {
            let bias = match &l.kind {
                LayerKind::Dense(d) => &d.bias,
                LayerKind::Lora(a) => &a.bias,
            };
            if bias.shape() != [l.out_dim()] {
                return Err(Error::dim("layer_bias", bias.shape(), &[l.out_dim()]));
            }
        }
        Ok(Self {
            input_dim: first.in_dim(),
            classes: last.out_dim(),
            layers,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Ids of the trainable tensors of the output layer.
    pub fn head_ids(&self) -> Vec<String> {
        layer_param_ids(self.head_index(), &self.layers[self.head_index()])
    }

    /// Trainable tensors in layer order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match &l.kind {
                LayerKind::Dense(d) => {
                    out.push((format!("L{i}.weight"), &d.weight));
                    out.push((format!("L{i}.bias"), &d.bias));
                }
                LayerKind::Lora(a) => {
                    out.push((format!("L{i}.lora_up"), a.lora.up()));
                    out.push((format!("L{i}.lora_down"), a.lora.down()));
                }
            }
        }
        out
    }

    pub fn param_ids(&self) -> Vec<String> {
        self.params().into_iter().map(|(id, _)| id).collect()
    }

    pub fn param(&self, id: &str) -> Option<&Tensor> {
        self.params()
            .into_iter()
            .find(|(k, _)| k == id)
            .map(|(_, t)| t)
    }

    pub fn set_param(&mut self, id: &str, value: Tensor) -> Result<()> {
        let (index, field) = parse_param_id(id)?;
        let layer = self
            .layers
            .get_mut(index)
            .ok_or_else(|| Error::Input(format!("no layer for parameter `{id}`")))?;
        let slot = match (&mut layer.kind, field) {
            (LayerKind::Dense(d), "weight") => &mut d.weight,
            (LayerKind::Dense(d), "bias") => &mut d.bias,
            (LayerKind::Lora(a), "lora_up") => return a.lora.set_up(value),
            (LayerKind::Lora(a), "lora_down") => return a.lora.set_down(value),
            _ => return Err(Error::Input(format!("no trainable tensor `{id}`"))),
        };
        if !slot.same_shape(&value) {
            return Err(Error::dim("set_param", value.shape(), slot.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Copies each state's current parameters into the model.
    pub fn load_states(&mut self, states: &[LayerState]) -> Result<()> {
        for s in states {
            self.set_param(&s.layer_id, s.theta.clone())?;
        }
        Ok(())
    }

    /// Replaces the output layer with a freshly initialized dense layer.
    pub fn reinit_head(&mut self, rng: &mut Rng) {
        let head = self
            .layers
            .last_mut()
            .expect("models have at least one layer");
        let (fan_out, fan_in) = (head.out_dim(), head.in_dim());
        head.kind = LayerKind::Dense(fresh_dense(fan_in, fan_out, head.activation, rng));
    }

    /// Wraps every dense layer's weight as a frozen LoRA base of the given rank.
    pub fn to_lora(&self, rank: usize, rng: &mut Rng) -> Result<MlpModel> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let kind = match &l.kind {
                    LayerKind::Dense(d) => LayerKind::Lora(Adapted {
                        lora: LoraLayer::new(d.weight.clone(), rank, rng)?,
                        bias: d.bias.clone(),
                    }),
                    LayerKind::Lora(a) => LayerKind::Lora(a.clone()),
                };
                Ok(Layer {
                    kind,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpModel {
            layers,
            input_dim: self.input_dim,
            classes: self.classes,
        })
    }

    pub fn lora_layers(&self) -> impl Iterator<Item = (usize, &LoraLayer)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match &l.kind {
                LayerKind::Lora(a) => Some((i, &a.lora)),
                LayerKind::Dense(_) => None,
            })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.input_dim {
            return Err(Error::dim(
                "model_input",
                x.shape(),
                &[x.shape()[0], self.input_dim],
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the logits node [B×K].
    pub fn forward(&self, x: &Tensor, tape: &mut Tape) -> Result<NodeId> {
        self.check_input(x)?;
        let mut h = tape.var(x.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let pre = match &l.kind {
                LayerKind::Dense(d) => {
                    let w = tape.param(format!("L{i}.weight"), d.weight.clone());
                    let b = tape.param(format!("L{i}.bias"), d.bias.clone());
                    let wt = tape.transpose(w);
                    let xw = tape.matmul(h, wt)?;
                    tape.add_bias(xw, b)?
                }
                LayerKind::Lora(a) => {
                    let w0 = tape.var(a.lora.w0().clone());
                    let up = tape.param(format!("L{i}.lora_up"), a.lora.up().clone());
                    let down = tape.param(format!("L{i}.lora_down"), a.lora.down().clone());
                    let b = tape.var(a.bias.clone());
                    let w0t = tape.transpose(w0);
                    let base = tape.matmul(h, w0t)?;
                    let down_t = tape.transpose(down);
                    let low = tape.matmul(h, down_t)?;
                    let up_t = tape.transpose(up);
                    let delta = tape.matmul(low, up_t)?;
                    let sum = tape.add(base, delta)?;
                    tape.add_bias(sum, b)?
                }
            };
            h = match l.activation {
                Activation::Relu => tape.relu(pre),
                Activation::Tanh => tape.tanh(pre),
                Activation::None => pre,
            };
        }
        Ok(h)
    }

    /// Mean cross-entropy on a batch and its gradient for every trainable tensor.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let logits = self.forward(x, &mut tape)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = tape.value(loss).data()[0];
        Ok((value, tape.backward(loss)?))
    }

    /// Logits without recording a tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            let pre = match &l.kind {
                LayerKind::Dense(d) => {
                    add_rows(&tensor::matmul(&h, &d.weight.transpose())?, &d.bias)?
                }
                LayerKind::Lora(a) => {
                    let base = tensor::matmul(&h, &a.lora.w0().transpose())?;
                    let low = tensor::matmul(&h, &a.lora.down().transpose())?;
                    let delta = tensor::matmul(&low, &a.lora.up().transpose())?;
                    add_rows(&base.add(&delta)?, &a.bias)?
                }
            };
            let act = l.activation;
            h = pre.map(|v| act.apply(v));
        }
        Ok(h)
    }

    /// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Input(
                "accuracy of an empty batch is undefined".into(),
            ));
        }
        if x.shape()[0] != labels.len() {
            return Err(Error::dim("accuracy", x.shape(), &[labels.len()]));
        }
        let logits = self.predict(x)?;
        Ok(argmax_accuracy(&logits, labels))
    }

    pub fn checkpoint_string(&self) -> String {
        let mut out = String::from("spd-checkpoint 1\n");
        let _ = writeln!(
            out,
            "model {} {} {}",
            self.input_dim,
            self.classes,
            self.layers.len()
        );
        for (i, l) in self.layers.iter().enumerate() {
            let act = l.activation.name();
            match &l.kind {
                LayerKind::Dense(d) => {
                    let _ = writeln!(out, "layer {i} dense {act}");
                    write_tensor(&mut out, &format!("L{i}.weight"), &d.weight);
                    write_tensor(&mut out, &format!("L{i}.bias"), &d.bias);
                }
                LayerKind::Lora(a) => {
                    let _ = writeln!(out, "layer {i} lora {act} {}", a.lora.rank());
                    write_tensor(&mut out, &format!("L{i}.w0"), a.lora.w0());
                    write_tensor(&mut out, &format!("L{i}.lora_up"), a.lora.up());
                    write_tensor(&mut out, &format!("L{i}.lora_down"), a.lora.down());
                    write_tensor(&mut out, &format!("L{i}.bias"), &a.bias);
                }
            }
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Input(format!("checkpoint ends before {what}")))
        };
        if next("header")?.trim() != "spd-checkpoint 1" {
            return Err(Error::Input("not a version-1 checkpoint".into()));
        }
        let model = fields(next("model line")?, "model")?;
        let n_layers: usize = parse_num(model.get(2).copied())?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let head = fields(next("layer line")?, "layer")?;
            if parse_num::<usize>(head.first().copied())? != i {
                return Err(Error::Input(format!("layer {i} is out of order")));
            }
            let activation = Activation::parse(head.get(2).copied().unwrap_or(""))?;
            let mut tensor_named = |name: String| -> Result<Tensor> {
                let (found, t) = read_tensor(next("tensor line")?)?;
                if found != name {
                    return Err(Error::Input(format!(
                        "expected tensor `{name}`, found `{found}`"
                    )));
                }
                Ok(t)
            };
            let kind = match head.get(1).copied() {
                Some("dense") => LayerKind::Dense(Dense {
                    weight: tensor_named(format!("L{i}.weight"))?,
                    bias: tensor_named(format!("L{i}.bias"))?,
                }),
                Some("lora") => {
                    let w0 = tensor_named(format!("L{i}.w0"))?;
                    let up = tensor_named(format!("L{i}.lora_up"))?;
                    let down = tensor_named(format!("L{i}.lora_down"))?;
                    let bias = tensor_named(format!("L{i}.bias"))?;
                    let lora = LoraLayer::from_parts(w0, up, down)?;
                    if parse_num::<usize>(head.get(3).copied())? != lora.rank() {
                        return Err(Error::Input(format!(
                            "layer {i}: rank does not match factors"
                        )));
                    }
                    LayerKind::Lora(Adapted { lora, bias })
                }
                other => return Err(Error::Input(format!("unknown layer kind {other:?}"))),
            };
            layers.push(Layer { kind, activation });
        }
        let model_out = Self::from_layers(layers)?;
        if model_out.input_dim != parse_num::<usize>(model.first().copied())?
            || model_out.classes != parse_num::<usize>(model.get(1).copied())?
        {
            return Err(Error::Input("model dims disagree with its layers".into()));
        }
        Ok(model_out)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.checkpoint_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Self::from_checkpoint_str(&text)
    }
}

fn layer_param_ids(i: usize, l: &Layer) -> Vec<String> {
    match l.kind {
        LayerKind::Dense(_) => vec![format!("L{i}.weight"), format!("L{i}.bias")],
        LayerKind::Lora(_) => vec![format!("L{i}.lora_up"), format!("L{i}.lora_down")],
    }
}

fn parse_param_id(id: &str) -> Result<(usize, &str)> {
    let bad = || Error::Input(format!("malformed parameter id `{id}`"));
    let rest = id.strip_prefix('L').ok_or_else(bad)?;
    let (index, field) = rest.split_once('.').ok_or_else(bad)?;
    Ok((index.parse().map_err(|_| bad())?, field))
}

fn add_rows(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = bias.numel();
    if x.shape()[1] != n {
        return Err(Error::dim("add_bias", x.shape(), bias.shape()));
    }
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bias.data()[i % n])
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn argmax_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn snapshot_anchor(model: &MlpModel) -> Snapshot {
    Snapshot(
        model
            .params()
            .into_iter()
            .map(|(id, t)| (id, t.clone()))
            .collect(),
    )
}

/// `‖θ − θ₀‖₂` for every trainable tensor the anchor covers, in model order.
pub fn layer_deviations(model: &MlpModel, anchor: &Snapshot) -> Result<Vec<(String, f64)>> {
    model
        .params()
        .into_iter()
        .filter_map(|(id, t)| anchor.get(&id).map(|a| (id, t, a)))
        .map(|(id, t, a)| Ok((id, tensor::distance(t, a)?)))
        .collect()
}

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    let _ = write!(out, "tensor {name}");
    for e in t.shape() {
        let _ = write!(out, " {e}");
    }
    out.push_str(" :");
    for v in t.data() {
        let _ = write!(out, " {v:e}");
    }
    out.push('\n');
}

fn fields<'a>(line: &'a str, tag: &str) -> Result<Vec<&'a str>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(Error::Input(format!(
            "expected a `{tag}` line, got `{line}`"
        )));
    }
    Ok(parts.collect())
}

fn parse_num<T: std::str::FromStr>(s: Option<&str>) -> Result<T> {
    let s = s.ok_or_else(|| Error::Input("missing number in checkpoint".into()))?;
    s.parse()
        .map_err(|_| Error::Input(format!("bad number `{s}` in checkpoint")))
}

fn read_tensor(line: &str) -> Result<(String, Tensor)> {
    let (head, values) = line
        .split_once(':')
        .ok_or_else(|| Error::Input("tensor line lacks `:`".into()))?;
    let head = fields(head, "tensor")?;
    let name = head
        .first()
        .ok_or_else(|| Error::Input("tensor line lacks a name".into()))?
        .to_string();
    let shape = head[1..]
        .iter()
        .map(|s| parse_num(Some(s)))
        .collect::<Result<Vec<usize>>>()?;
    let data = values
        .split_whitespace()
        .map(|s| parse_num(Some(s)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((name, Tensor::new(shape, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, rng::normals(rng, rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn same_seed_same_model() {
        let a = MlpModel::init(&[3, 8, 2], Activation::Relu, 11).unwrap();
        let b = MlpModel::init(&[3, 8, 2], Activation::Relu, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, MlpModel::init(&[3, 8, 2], Activation::Relu, 12).unwrap());
    }

    #[test]
    fn structure_and_zero_biases() {
        let m = MlpModel::init(&[2, 4, 3], Activation::Tanh, 0).unwrap();
        assert_eq!(
            m.param_ids(),
            ["L0.weight", "L0.bias", "L1.weight", "L1.bias"]
        );
        assert_eq!(m.param("L0.weight").unwrap().shape(), &[4, 2]);
        assert_eq!(m.param("L1.bias").unwrap(), &Tensor::zeros(&[3]));
        assert_eq!(m.head_ids(), ["L1.weight", "L1.bias"]);
        assert!(matches!(
            MlpModel::init(&[2], Activation::Relu, 0),
            Err(Error::Config(_))
        ));
        assert!(MlpModel::init(&[], Activation::Relu, 0).is_err());
    }

    #[test]
    fn linear_model_is_affine_map() {
        let mut m = MlpModel::init(&[2, 2], Activation::Relu, 0).unwrap();
        m.set_param(
            "L0.weight",
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        )
        .unwrap();
        m.set_param("L0.bias", Tensor::vector(vec![0.5, -0.5]).unwrap())
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let logits = m.predict(&x).unwrap();
        assert_eq!(logits.data(), &[3.5, 6.5, -0.5, -3.5]);
    }

    #[test]
    fn zero_model_gives_uniform_loss() {
        let mut m = MlpModel::init(&[3, 5, 4], Activation::Relu, 0).unwrap();
        for (id, t) in m
            .params()
            .into_iter()
            .map(|(i, t)| (i, t.clone()))
            .collect::<Vec<_>>()
        {
            m.set_param(&id, Tensor::zeros(t.shape())).unwrap();
        }
        let x = Tensor::full(&[2, 3], 0.7);
        assert!(m.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let (loss, _) = m.loss_and_grads(&x, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn taped_forward_matches_direct_evaluation() {
        let mut rng = rng::stream(7, 0);
        for act in [Activation::Relu, Activation::Tanh] {
            let m = MlpModel::init_with(&[5, 7, 6, 3], act, &mut rng).unwrap();
            let x = batch(&mut rng, 4, 5);
            let mut tape = Tape::new();
            let node = m.forward(&x, &mut tape).unwrap();
            let direct = m.predict(&x).unwrap();
            for (a, b) in tape.value(node).data().iter().zip(direct.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = MlpModel::init(&[3, 2], Activation::Relu, 0).unwrap();
        let err = m.predict(&Tensor::zeros(&[1, 4])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut m = MlpModel::init(&[3, 4, 2], Activation::Relu, 1).unwrap();
        let snap = snapshot_anchor(&m);
        assert!(layer_deviations(&m, &snap)
            .unwrap()
            .iter()
            .all(|(_, d)| *d == 0.0));
        let before = snap.clone();
        m.set_param("L0.bias", Tensor::full(&[4], 1.0)).unwrap();
        assert_eq!(snap, before);
        let devs = layer_deviations(&m, &snap).unwrap();
        assert_eq!(devs[1], ("L0.bias".to_string(), 2.0));
    }

    #[test]
    fn states_from_snapshot_start_at_zero_deviation() {
        let m = MlpModel::init(&[3, 4, 2], Activation::Relu, 1).unwrap();
        let snap = snapshot_anchor(&m);
        for (id, t) in m.params() {
            let s = LayerState::new(id.clone(), t.clone(), snap.get(&id).unwrap().clone()).unwrap();
            assert_eq!(s.gamma_prev, 0.0);
        }
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        let logits = Tensor::from_rows(&[vec![2.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(argmax_accuracy(&logits, &[0, 1]), 1.0);
        assert_eq!(argmax_accuracy(&logits, &[1, 1]), 0.5);
    }

    #[test]
    fn accuracy_of_empty_batch_is_an_error() {
        let m = MlpModel::init(&[2, 2], Activation::Relu, 0).unwrap();
        let err = m.accuracy(&Tensor::zeros(&[1, 2]), &[]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn constant_predictor_on_random_labels_is_near_half() {
        let mut m = MlpModel::init(&[1, 2], Activation::Relu, 0).unwrap();
        m.set_param("L0.weight", Tensor::zeros(&[2, 1])).unwrap();
        let mut rng = rng::stream(3, 0);
        let n = 4000;
        let labels: Vec<usize> = (0..n)
            .map(|_| rand::Rng::random_range(&mut rng, 0..2))
            .collect();
        let acc = m.accuracy(&Tensor::zeros(&[n, 1]), &labels).unwrap();
        // Binomial(n, 1/2): four standard deviations.
        let sd = (0.25 / n as f64).sqrt();
        assert!((acc - 0.5).abs() < 4.0 * sd, "{acc}");
    }

    #[test]
    fn reinit_head_changes_only_the_head() {
        let m = MlpModel::init(&[3, 4, 2], Activation::Relu, 1).unwrap();
        let mut fresh = m.clone();
        fresh.reinit_head(&mut rng::stream(99, 0));
        assert_eq!(m.param("L0.weight"), fresh.param("L0.weight"));
        assert_ne!(m.param("L1.weight"), fresh.param("L1.weight"));
        assert_eq!(fresh.param("L1.bias").unwrap(), &Tensor::zeros(&[2]));
    }

    #[test]
    fn lora_model_starts_at_base_function() {
        let mut rng = rng::stream(5, 0);
        let m = MlpModel::init_with(&[4, 6, 3], Activation::Relu, &mut rng).unwrap();
        let lm = m.to_lora(2, &mut rng).unwrap();
        assert_eq!(
            lm.param_ids(),
            ["L0.lora_up", "L0.lora_down", "L1.lora_up", "L1.lora_down"]
        );
        let x = batch(&mut rng, 5, 4);
        assert_eq!(m.predict(&x).unwrap(), lm.predict(&x).unwrap());
        let (_, grads) = lm.loss_and_grads(&x, &[0, 1, 2, 0, 1]).unwrap();
        assert_eq!(grads.len(), 4);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = rng::stream(8, 0);
        let mut m = MlpModel::init_with(&[3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        m.set_param(
            "L0.bias",
            Tensor::vector(vec![0.1, -0.0, 1e-300, f64::MAX, -1.0 / 3.0]).unwrap(),
        )
        .unwrap();
        let back = MlpModel::from_checkpoint_str(&m.checkpoint_string()).unwrap();
        let bits = |m: &MlpModel| -> Vec<u64> {
            m.params()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&m), bits(&back));
        assert_eq!(m, back);

        let lm = m.to_lora(1, &mut rng).unwrap();
        let back = MlpModel::from_checkpoint_str(&lm.checkpoint_string()).unwrap();
        assert_eq!(lm, back);
    }

    #[test]
    fn malformed_checkpoints_are_rejected() {
        assert!(MlpModel::from_checkpoint_str("").is_err());
        assert!(MlpModel::from_checkpoint_str("spd-checkpoint 2\n").is_err());
        let m = MlpModel::init(&[2, 2], Activation::Relu, 0).unwrap();
        let text = m.checkpoint_string().replace("L0.bias", "L0.other");
        assert!(MlpModel::from_checkpoint_str(&text).is_err());
    }

    #[test]
    fn deviation_is_additive_over_layers() {
        let mut rng = rng::stream(9, 0);
        let m = MlpModel::init_with(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let anchor =
            snapshot_anchor(&MlpModel::init_with(&[3, 4, 2], Activation::Relu, &mut rng).unwrap());
        let per_layer = layer_deviations(&m, &anchor).unwrap();
        let sum_sq: f64 = per_layer.iter().map(|(_, d)| d * d).sum();
        let flat: f64 = m
            .params()
            .iter()
            .flat_map(|(id, t)| {
                let a = anchor.get(id).unwrap().data().to_vec();
                t.data()
                    .iter()
                    .zip(a)
                    .map(|(x, y)| (x - y) * (x - y))
                    .collect::<Vec<_>>()
            })
            .sum();
        assert!((sum_sq - flat).abs() <= 1e-12 * flat);
    }
}
