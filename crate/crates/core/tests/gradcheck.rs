//! Analytic gradients against central finite differences.

use std::collections::BTreeMap;

use spd_core::autodiff::{NodeId, Tape};
use spd_core::models::{Activation, MlpModel};
use spd_core::rng::{self, Rng};
use spd_core::Tensor;

const H: f64 = 1e-5;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normals(rng, n, 1.0)).unwrap()
}

/// Entries of magnitude at least `gap`, so ReLU kinks are out of finite-difference reach.
fn away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    random(rng, shape).map(|v| v + gap * v.signum())
}

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-8 || diff / analytic.abs().max(numeric.abs()) < 1e-5
}

/// Builds a scalar loss from named inputs; all inputs are trainable.
type Build<'a> = dyn Fn(&mut Tape, &BTreeMap<String, NodeId>) -> NodeId + 'a;

fn eval(inputs: &BTreeMap<String, Tensor>, build: &Build<'_>) -> (f64, BTreeMap<String, Tensor>) {
    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|(k, t)| (k.clone(), tape.param(k.clone(), t.clone())))
        .collect();
    let loss = build(&mut tape, &ids);
    let value = tape.value(loss).data()[0];
    (value, tape.backward(loss).unwrap())
}

fn check(inputs: BTreeMap<String, Tensor>, build: &Build<'_>) -> Result<(), String> {
    let (_, grads) = eval(&inputs, build);
    for (name, t) in &inputs {
        for i in 0..t.numel() {
            let nudge = |delta: f64| {
                let mut moved = inputs.clone();
                let mut data = t.data().to_vec();
                data[i] += delta;
                moved.insert(name.clone(), Tensor::new(t.shape().to_vec(), data).unwrap());
                eval(&moved, build).0
            };
            let numeric = (nudge(H) - nudge(-H)) / (2.0 * H);
            let analytic = grads[name].data()[i];
            if !close(analytic, numeric) {
                return Err(format!(
                    "{name}[{i}]: analytic {analytic} vs numeric {numeric}"
                ));
            }
        }
    }
    Ok(())
}

fn inputs(pairs: Vec<(&str, Tensor)>) -> BTreeMap<String, Tensor> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Reduces a node to a scalar through a fixed random projection.
fn project(tape: &mut Tape, node: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(node).shape().to_vec();
    let weights = random(&mut rng::stream(seed, 77), &shape);
    let w = tape.var(weights);
    tape.dot(node, w).unwrap()
}

#[test]
fn every_op_matches_finite_differences() {
    for trial in 0..10u64 {
        let mut rng = rng::stream(100 + trial, 0);
        let (m, k, n) = (2 + trial as usize % 3, 3, 2 + trial as usize % 2);

        check(
            inputs(vec![
                ("a", random(&mut rng, &[m, k])),
                ("b", random(&mut rng, &[k, n])),
            ]),
            &|t, ids| {
                let p = t.matmul(ids["a"], ids["b"]).unwrap();
                project(t, p, trial)
            },
        )
        .unwrap();

        check(inputs(vec![("a", random(&mut rng, &[m, k]))]), &|t, ids| {
            let p = t.transpose(ids["a"]);
            project(t, p, trial)
        })
        .unwrap();

        check(
            inputs(vec![
                ("a", random(&mut rng, &[m, k])),
                ("b", random(&mut rng, &[k])),
            ]),
            &|t, ids| {
                let p = t.add_bias(ids["a"], ids["b"]).unwrap();
                project(t, p, trial)
            },
        )
        .unwrap();

        check(
            inputs(vec![
                ("a", random(&mut rng, &[m, k])),
                ("b", random(&mut rng, &[m, k])),
            ]),
            &|t, ids| {
                let p = t.add(ids["a"], ids["b"]).unwrap();
                project(t, p, trial)
            },
        )
        .unwrap();

        check(
            inputs(vec![("a", away_from_zero(&mut rng, &[m, k], 1e-3))]),
            &|t, ids| {
                let p = t.relu(ids["a"]);
                project(t, p, trial)
            },
        )
        .unwrap();

        check(inputs(vec![("a", random(&mut rng, &[m, k]))]), &|t, ids| {
            let p = t.tanh(ids["a"]);
            project(t, p, trial)
        })
        .unwrap();

        check(inputs(vec![("a", random(&mut rng, &[k]))]), &|t, ids| {
            let p = t.scale(ids["a"], -1.7);
            project(t, p, trial)
        })
        .unwrap();

        check(
            inputs(vec![
                ("a", random(&mut rng, &[m, k])),
                ("b", random(&mut rng, &[m, k])),
            ]),
            &|t, ids| t.dot(ids["a"], ids["b"]).unwrap(),
        )
        .unwrap();

        let labels: Vec<usize> = (0..m).map(|i| (i * 7 + trial as usize) % 4).collect();
        check(
            inputs(vec![("z", random(&mut rng, &[m, 4]).scale(3.0))]),
            &|t, ids| t.softmax_cross_entropy(ids["z"], &labels).unwrap(),
        )
        .unwrap();
    }
}

#[test]
fn quadratic_gradient_is_theta() {
    let theta = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();
    let (_, g) = eval(&inputs(vec![("w", theta.clone())]), &|t, ids| {
        let sq = t.dot(ids["w"], ids["w"]).unwrap();
        t.scale(sq, 0.5)
    });
    assert_eq!(g["w"], theta);
}

fn mlp_loss(model: &MlpModel, x: &Tensor, labels: &[usize]) -> f64 {
    model.loss_and_grads(x, labels).unwrap().0
}

#[test]
fn mlp_loss_gradients_match_finite_differences() {
    let mut rng = rng::stream(2024, 0);
    for config in 0..50u64 {
        let act = if config % 2 == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let d = 2 + (config % 4) as usize;
        let hidden = 3 + (config % 5) as usize;
        let classes = 2 + (config % 3) as usize;
        let dims = if config % 3 == 0 {
            vec![d, hidden, classes]
        } else {
            vec![d, hidden, hidden, classes]
        };
        let model = MlpModel::init(&dims, act, config).unwrap();
        let batch = 3 + (config % 4) as usize;
        let x = random(&mut rng, &[batch, d]);
        let labels: Vec<usize> = (0..batch)
            .map(|i| (i + config as usize) % classes)
            .collect();
        let (_, grads) = model.loss_and_grads(&x, &labels).unwrap();
        for (id, t) in model.params() {
            for i in 0..t.numel() {
                let nudge = |delta: f64| {
                    let mut data = t.data().to_vec();
                    data[i] += delta;
                    let mut moved = model.clone();
                    moved
                        .set_param(&id, Tensor::new(t.shape().to_vec(), data).unwrap())
                        .unwrap();
                    mlp_loss(&moved, &x, &labels)
                };
                let (plus, minus) = (nudge(H), nudge(-H));
                let numeric = (plus - minus) / (2.0 * H);
                let analytic = grads[&id].data()[i];
                // A ReLU crossing inside [−h, h] makes the difference quotient
                // meaningless; the one-sided quotients disagree in that case.
                let base = mlp_loss(&model, &x, &labels);
                let kink = act == Activation::Relu
                    && ((plus - base) / H - (base - minus) / H).abs()
                        > 1e-3 * (1.0 + numeric.abs());
                if kink {
                    continue;
                }
                assert!(
                    close(analytic, numeric),
                    "config {config} {id}[{i}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = rng::stream(5, 0);
    let a = random(&mut rng, &[3, 2]);
    let b = random(&mut rng, &[2, 4]);
    let both = inputs(vec![("a", a), ("b", b)]);
    let first: &Build<'_> = &|t, ids| {
        let p = t.matmul(ids["a"], ids["b"]).unwrap();
        let q = t.tanh(p);
        project(t, q, 1)
    };
    let second: &Build<'_> = &|t, ids| t.dot(ids["a"], ids["a"]).unwrap();
    let (_, g1) = eval(&both, first);
    let (_, g2) = eval(&both, second);
    let (_, g12) = eval(&both, &|t, ids| {
        let l1 = first(t, ids);
        let l2 = second(t, ids);
        t.add(l1, l2).unwrap()
    });
    for name in ["a", "b"] {
        let sum = g1[name].add(&g2[name]).unwrap();
        for (x, y) in sum.data().iter().zip(g12[name].data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn repeated_backward_is_bitwise_identical() {
    let model = MlpModel::init(&[4, 8, 3], Activation::Relu, 3).unwrap();
    let x = random(&mut rng::stream(1, 0), &[6, 4]);
    let labels = [0, 1, 2, 0, 1, 2];
    let (_, g1) = model.loss_and_grads(&x, &labels).unwrap();
    let (_, g2) = model.loss_and_grads(&x, &labels).unwrap();
    let bits = |g: &BTreeMap<String, Tensor>| -> Vec<u64> {
        g.values()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&g1), bits(&g2));
}
