//! Rotated Gaussian-cluster domains.
//!
//! Class `k` of `K` has its mean on a unit circle at angle `2πk/K`. A domain
//! adds isotropic Gaussian noise and rotates every sample by `rotation_deg`,
//! plus an optional uniform jitter, in the plane of the first two
//! coordinates. Where the circle lives is
//! set by [`Geometry`]:
//!
//! * `coordinate_plane`: the circle spans coordinates 0 and 1, so a rotation
//!   moves the whole class signal.
//! * `split_plane`: the circle spans `(e₀ + e₂)/√2` and `(e₁ + e₃)/√2`. Half
//!   of the class signal sits in coordinates 0–1 and turns with the domain;
//!   the other half sits in coordinates 2–3 and is shared by every domain.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use spd_core::rng;
use spd_core::Tensor;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub rotation_deg: f64,
    /// Width of a uniform per-sample rotation jitter centred on
    /// `rotation_deg`; 0 gives every sample the same rotation.
    #[serde(default)]
    pub rotation_spread_deg: f64,
    pub noise_sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl DomainSpec {
    /// A disjoint sample of the same distribution.
    pub fn held_out(&self, n_samples: usize) -> DomainSpec {
        DomainSpec {
            n_samples,
            seed: rng::substream(self.seed, 1),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    CoordinatePlane,
    SplitPlane,
}

impl Geometry {
    pub fn min_dim(self) -> usize {
        match self {
            Geometry::CoordinatePlane => 2,
            Geometry::SplitPlane => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataShape {
    pub dim: usize,
    pub classes: usize,
    pub geometry: Geometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Samples as rows, `[n × dim]`.
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.x.row(r));
        }
        let x = Tensor::matrix(rows.len(), d, data).expect("rows are non-empty");
        (x, rows.iter().map(|&r| self.labels[r]).collect())
    }
}

/// Unrotated mean of class `k`.
pub fn class_mean(k: usize, shape: &DataShape) -> Vec<f64> {
    let angle = std::f64::consts::TAU * k as f64 / shape.classes as f64;
    let (s, c) = angle.sin_cos();
    let mut mean = vec![0.0; shape.dim];
    match shape.geometry {
        Geometry::CoordinatePlane => {
            mean[0] = c;
            mean[1] = s;
        }
        Geometry::SplitPlane => {
            let h = std::f64::consts::FRAC_1_SQRT_2;
            mean[0] = c * h;
            mean[1] = s * h;
            mean[2] = c * h;
            mean[3] = s * h;
        }
    }
    mean
}

/// Rotates the first two coordinates by `deg` degrees, in place.
pub fn rotate(point: &mut [f64], deg: f64) {
    let (s, c) = deg.rem_euclid(360.0).to_radians().sin_cos();
    let (x0, x1) = (point[0], point[1]);
    point[0] = c * x0 - s * x1;
    point[1] = s * x0 + c * x1;
}

pub fn generate_domain(spec: &DomainSpec, shape: &DataShape) -> Result<Dataset> {
    if shape.dim < shape.geometry.min_dim() {
        return Err(HarnessError::Config(format!(
            "{:?} geometry needs at least {} input dims, got {}",
            shape.geometry,
            shape.geometry.min_dim(),
            shape.dim
        )));
    }
    if shape.classes < 2 {
        return Err(HarnessError::Config(
            "a domain needs at least two classes".into(),
        ));
    }
    if spec.n_samples == 0
        || spec.noise_sigma.is_nan()
        || spec.noise_sigma < 0.0
        || !spec.rotation_deg.is_finite()
        || !(spec.rotation_spread_deg >= 0.0 && spec.rotation_spread_deg <= 360.0)
    {
        return Err(HarnessError::Config(format!(
            "invalid domain spec {spec:?}"
        )));
    }
    let means: Vec<Vec<f64>> = (0..shape.classes).map(|k| class_mean(k, shape)).collect();
    let mut rng = rng::stream(spec.seed, 0);
    let mut data = Vec::with_capacity(spec.n_samples * shape.dim);
    let mut labels = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let k = rng.random_range(0..shape.classes);
        let mut point: Vec<f64> = means[k]
            .iter()
            .map(|m| m + spec.noise_sigma * rng::normal(&mut rng))
            .collect();
        let jitter = if spec.rotation_spread_deg > 0.0 {
            spec.rotation_spread_deg * (rng.random::<f64>() - 0.5)
        } else {
            0.0
        };
        rotate(&mut point, spec.rotation_deg + jitter);
        data.extend(point);
        labels.push(k);
    }
    Ok(Dataset {
        x: Tensor::matrix(spec.n_samples, shape.dim, data)?,
        labels,
    })
}
