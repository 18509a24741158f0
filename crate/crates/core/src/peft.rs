//! Low-rank adapters with origin-anchored decay.
//!
//! A [`LoraLayer`] keeps its base weight `W₀` frozen and learns
//! `ΔW = W_up · W_down`. In PEFT mode the adapter factors are anchored at
//! zero, so the selection condition for each factor reduces to
//! `c_t = −gᵀW` and SPD acts as a selective weight decay on `W_up` and
//! `W_down` individually.

use crate::error::{Error, Result};
use crate::optim::{AnchorMode, LayerState};
use crate::rng::{self, Rng};
use crate::tensor::{self, Tensor};

/// Standard deviation of the Gaussian `W_down` initialization.
pub const DOWN_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    w0: Tensor,
    up: Tensor,
    down: Tensor,
}

impl LoraLayer {
    /// Wraps `w0` [m×n] with a rank-`rank` adapter: `W_up = 0`,
    /// `W_down ~ N(0, 0.01²)`, so the layer starts exactly at `w0`.
    pub fn new(w0: Tensor, rank: usize, rng: &mut Rng) -> Result<Self> {
        let (m, n) = matrix_dims(&w0)?;
        if rank == 0 || rank > m.min(n) {
            return Err(Error::Config(format!(
                "LoRA rank must lie in [1, {}], got {rank}",
                m.min(n)
            )));
        }
        let up = Tensor::zeros(&[m, rank]);
        let down = Tensor::matrix(rank, n, rng::normals(rng, rank * n, DOWN_INIT_STD))?;
        Ok(Self { w0, up, down })
    }

    pub fn from_parts(w0: Tensor, up: Tensor, down: Tensor) -> Result<Self> {
        let (m, n) = matrix_dims(&w0)?;
        let (um, r) = matrix_dims(&up)?;
        let (dr, dn) = matrix_dims(&down)?;
        if um != m || dn != n || dr != r || r > m.min(n) {
            return Err(Error::dim("lora_from_parts", up.shape(), down.shape()));
        }
        Ok(Self { w0, up, down })
    }

    pub fn rank(&self) -> usize {
        self.up.shape()[1]
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }

    pub fn up(&self) -> &Tensor {
        &self.up
    }

    pub fn down(&self) -> &Tensor {
        &self.down
    }

    pub fn set_up(&mut self, up: Tensor) -> Result<()> {
        if !up.same_shape(&self.up) {
            return Err(Error::dim("set_up", up.shape(), self.up.shape()));
        }
        self.up = up;
        Ok(())
    }

    pub fn set_down(&mut self, down: Tensor) -> Result<()> {
        if !down.same_shape(&self.down) {
            return Err(Error::dim("set_down", down.shape(), self.down.shape()));
        }
        self.down = down;
        Ok(())
    }

    /// Materialized `W₀ + W_up·W_down`.
    pub fn effective_weight(&self) -> Tensor {
        let delta = tensor::matmul(&self.up, &self.down).expect("factor shapes are validated");
        self.w0.add(&delta).expect("delta has the base shape")
    }
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::Input(format!(
            "expected a matrix, got shape {other:?}"
        ))),
    }
}

/// `W₀x + W_up(W_down x)` for column inputs `x` [n×B]; never forms `ΔW`.
pub fn lora_forward(layer: &LoraLayer, x: &Tensor) -> Result<Tensor> {
    let base = tensor::matmul(&layer.w0, x)?;
    let low = tensor::matmul(&layer.down, x)?;
    let delta = tensor::matmul(&layer.up, &low)?;
    base.add(&delta)
}

/// `‖W_up·W_down‖_F`. Materializes the product, so keep it out of training loops.
pub fn delta_norm(layer: &LoraLayer) -> f64 {
    let delta = tensor::matmul(&layer.up, &layer.down).expect("factor shapes are validated");
    tensor::l2_norm(&delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorPolicy {
    pub mode: AnchorMode,
}

impl AnchorPolicy {
    pub const ORIGIN: AnchorPolicy = AnchorPolicy {
        mode: AnchorMode::Origin,
    };
}

/// Optimizer states for the two adapter factors, ids `{prefix}.lora_up` and
/// `{prefix}.lora_down`, both anchored at zero. `W₀` is frozen and gets none.
pub fn adapter_states(
    layer: &LoraLayer,
    policy: AnchorPolicy,
    prefix: &str,
) -> Result<[LayerState; 2]> {
    if policy.mode != AnchorMode::Origin {
        return Err(Error::Config(
            "adapter tensors must be anchored at the origin; their initialization \
             carries no pretrained knowledge"
                .into(),
        ));
    }
    Ok([
        LayerState::anchored_at_origin(format!("{prefix}.lora_up"), layer.up.clone()),
        LayerState::anchored_at_origin(format!("{prefix}.lora_down"), layer.down.clone()),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{self, OptimizerConfig, RegMode};
    use std::collections::BTreeMap;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, rng::normals(rng, rows * cols, 1.0)).unwrap()
    }

    #[test]
    fn zero_up_projection_is_base_forward() {
        let mut rng = rng::stream(1, 0);
        let w0 = random(&mut rng, 4, 3);
        let layer = LoraLayer::new(w0.clone(), 2, &mut rng).unwrap();
        let x = random(&mut rng, 3, 5);
        assert_eq!(
            lora_forward(&layer, &x).unwrap(),
            tensor::matmul(&w0, &x).unwrap()
        );
        assert_eq!(delta_norm(&layer), 0.0);
    }

    #[test]
    fn hand_computed_forward() {
        let layer = LoraLayer::from_parts(
            Tensor::zeros(&[2, 2]),
            Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(lora_forward(&layer, &x).unwrap().data(), &[4.0, 0.0]);
    }

    #[test]
    fn factored_forward_matches_materialized() {
        let mut rng = rng::stream(2, 0);
        let layer = LoraLayer::from_parts(
            random(&mut rng, 6, 5),
            random(&mut rng, 6, 2),
            random(&mut rng, 2, 5),
        )
        .unwrap();
        let x = random(&mut rng, 5, 4);
        let factored = lora_forward(&layer, &x).unwrap();
        let full = tensor::matmul(&layer.effective_weight(), &x).unwrap();
        for (a, b) in factored.data().iter().zip(full.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn rank_one_delta_norm_is_product_of_norms() {
        let u = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![2.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let layer = LoraLayer::from_parts(Tensor::zeros(&[3, 2]), u, v).unwrap();
        assert!((delta_norm(&layer) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn delta_norm_matches_naive_materialization() {
        let mut rng = rng::stream(3, 0);
        let (up, down) = (random(&mut rng, 5, 3), random(&mut rng, 3, 4));
        let mut naive = 0.0;
        for i in 0..5 {
            for j in 0..4 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += up.get2(i, p) * down.get2(p, j);
                }
                naive += s * s;
            }
        }
        let layer = LoraLayer::from_parts(Tensor::zeros(&[5, 4]), up, down).unwrap();
        assert!((delta_norm(&layer) - naive.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn rank_bounds_are_checked() {
        let mut rng = rng::stream(4, 0);
        assert!(LoraLayer::new(Tensor::zeros(&[3, 2]), 0, &mut rng).is_err());
        assert!(LoraLayer::new(Tensor::zeros(&[3, 2]), 3, &mut rng).is_err());
        assert!(LoraLayer::new(Tensor::zeros(&[3, 2]), 2, &mut rng).is_ok());
    }

    #[test]
    fn adapter_states_are_origin_anchored() {
        let mut rng = rng::stream(5, 0);
        let layer = LoraLayer::new(random(&mut rng, 4, 4), 2, &mut rng).unwrap();
        let [up, down] = adapter_states(&layer, AnchorPolicy::ORIGIN, "L0").unwrap();
        assert_eq!(up.layer_id, "L0.lora_up");
        assert_eq!(down.layer_id, "L0.lora_down");
        assert_eq!(up.gamma_prev, 0.0);
        assert_eq!(down.theta0, Tensor::zeros(&[2, 4]));
        assert!((down.gamma_prev - tensor::l2_norm(layer.down())).abs() == 0.0);
        let pretrained = AnchorPolicy {
            mode: AnchorMode::Pretrained,
        };
        assert!(matches!(
            adapter_states(&layer, pretrained, "L0"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unit_lambda_spd_on_adapter_keeps_previous_norm() {
        // gᵀW = 8 > 0 fires the condition, while Adam's sign-like first step
        // moves W = (1, −2) to (1 − α, −2 − α) and grows its norm.
        let up = Tensor::from_rows(&[vec![1.0], vec![-2.0]]).unwrap();
        let grad = Tensor::from_rows(&[vec![10.0], vec![1.0]]).unwrap();
        let mut states = [LayerState::anchored_at_origin("L0.lora_up", up.clone())];
        let grads: BTreeMap<_, _> = [("L0.lora_up".to_string(), grad)].into();
        let cfg = OptimizerConfig::adam(0.05).with_mode(RegMode::Spd, 1.0);
        let before = tensor::l2_norm(&up);
        let report = optim::step(&mut states, &grads, &cfg).unwrap();
        let rec = &report.records[0];
        assert!(rec.c_t < 0.0 && rec.fired);
        assert!(rec.gamma_t > rec.gamma_prev);
        assert!((rec.post_deviation - before).abs() <= 1e-9 * before);
        assert!((tensor::l2_norm(&states[0].theta) - before).abs() <= 1e-9 * before);
    }
}
