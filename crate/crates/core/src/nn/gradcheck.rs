//! Central finite-difference gradient checker.
//!
//! The numeric side only ever calls train-mode `forward` and reads outputs,
//! so it stays independent of the backward implementations it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerGraph, Mode, Tensor};
use crate::error::Result;

/// Relative error `‖analytic − numeric‖ / max(‖numeric‖, 1e-6)` for one
/// gradient tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub target: String,
    pub rel_error: f64,
}

pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (*a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-6)
}

const DROPOUT_SEED: u64 = 0xD0;

fn projected(graph: &mut LayerGraph, x: &Tensor, proj: &[f64]) -> Result<f64> {
    graph.reseed_dropout(DROPOUT_SEED);
    let y = graph.forward(x, Mode::Train)?;
    Ok(y.data().iter().zip(proj).map(|(a, b)| *a as f64 * b).sum())
}

/// Checks input and parameter gradients of `graph` at `input` against
/// central differences of the scalar `Σ r ⊙ forward(x)` for a random
/// projection `r`.
pub fn check_graph(graph: &mut LayerGraph, input: &Tensor, step: f32, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph.reseed_dropout(DROPOUT_SEED);
    let out = graph.forward(input, Mode::Train)?;
    let proj: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let upstream = Tensor::new(out.shape().to_vec(), proj.iter().map(|&v| v as f32).collect())?;
    graph.zero_grad();
    let dx = graph.backward(&upstream)?;
    let param_grads: Vec<(String, Vec<f32>)> = graph
        .params()
        .iter()
        .map(|p| (p.id.clone(), p.grad.data().to_vec()))
        .collect();

    let mut report = Vec::new();
    let mut numeric = Vec::with_capacity(input.len());
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = projected(graph, &probe, &proj)?;
        probe.data_mut()[i] = orig - step;
        let minus = projected(graph, &probe, &proj)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step as f64));
    }
    report.push(GradCheck {
        target: "input".into(),
        rel_error: relative_error(dx.data(), &numeric),
    });

    for (pi, (id, analytic)) in param_grads.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = graph.params()[pi].value.data()[j];
            graph.params_mut()[pi].value.data_mut()[j] = orig + step;
            let plus = projected(graph, input, &proj)?;
            graph.params_mut()[pi].value.data_mut()[j] = orig - step;
            let minus = projected(graph, input, &proj)?;
            graph.params_mut()[pi].value.data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step as f64));
        }
        report.push(GradCheck {
            target: id.clone(),
            rel_error: relative_error(analytic, &numeric),
        });
    }
    graph.clear_cache();
    graph.zero_grad();
    Ok(report)
}

/// Checks a loss `f(x) -> (value, ∂f/∂x)` against central differences.
pub fn check_loss<F>(name: &str, input: &Tensor, step: f32, f: F) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = f(input)?;
    let mut probe = input.clone();
    let mut numeric = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?.0;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?.0;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step as f64));
    }
    Ok(GradCheck {
        target: name.to_string(),
        rel_error: relative_error(analytic.data(), &numeric),
    })
}

/// Finite-difference step used by the layer suite.
pub const SUITE_STEP: f32 = 1e-3;

/// Values in `±[0.1, 1.5]`, keeping every coordinate well clear of the
/// ReLU/PReLU kink at zero.
fn away_from_zero(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m: f32 = rng.gen_range(0.1..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Distinct values spaced 0.05 apart in random order, so no 2x2 pooling
/// window has a near tie.
fn spaced(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    v.shuffle(rng);
    v
}

/// Runs every layer kind and both losses on random 4×4-sized inputs.
pub fn run_layer_suite(seed: u64) -> Result<Vec<GradCheck>> {
    use super::loss;
    use super::{Activation, Init, LayerSpec};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = [2usize, 4, 4];
    let mut cases: Vec<(&str, Vec<usize>, Vec<LayerSpec>, bool)> = vec![
        (
            "conv2d k3",
            image.to_vec(),
            vec![LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
            }],
            false,
        ),
        (
            "conv2d k4",
            image.to_vec(),
            vec![LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 2,
                kernel: 4,
            }],
            false,
        ),
        (
            "conv2d k5",
            image.to_vec(),
            vec![LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 2,
                kernel: 5,
            }],
            false,
        ),
        (
            "batchnorm2d",
            image.to_vec(),
            vec![LayerSpec::BatchNorm2d { channels: 2 }],
            false,
        ),
        ("maxpool2x2", image.to_vec(), vec![LayerSpec::MaxPool2x2], true),
        ("flatten", image.to_vec(), vec![LayerSpec::Flatten], false),
        (
            "linear",
            vec![16],
            vec![LayerSpec::Linear { inputs: 16, outputs: 4 }],
            false,
        ),
        ("dropout", vec![16], vec![LayerSpec::Dropout { rate: 0.1 }], false),
        ("softmax", vec![5], vec![LayerSpec::Softmax], false),
        ("sigmoid", vec![4, 4], vec![LayerSpec::Sigmoid], false),
    ];
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("prelu", Activation::Prelu),
        ("elu", Activation::Elu),
        ("tanh", Activation::Tanh),
        ("gelu", Activation::Gelu),
    ] {
        cases.push((name, image.to_vec(), vec![LayerSpec::Activation { kind }], false));
    }

    let mut out = Vec::new();
    for (name, shape, specs, distinct) in cases {
        let mut graph = LayerGraph::build(name, &shape, &specs, Init::Normal { std: 0.5 }, rng.gen())?;
        let n: usize = 2 * shape.iter().product::<usize>();
        let data = if distinct {
            spaced(n, &mut rng)
        } else {
            away_from_zero(n, &mut rng)
        };
        let mut full = vec![2];
        full.extend_from_slice(&shape);
        let x = Tensor::new(full, data)?;
        for mut c in check_graph(&mut graph, &x, SUITE_STEP, rng.gen())? {
            c.target = format!("{name}/{}", c.target);
            out.push(c);
        }
    }

    // Cross-entropy against soft targets; the value is recomputed here in
    // f64 straight from its definition.
    let logits = Tensor::new(vec![3, 4], away_from_zero(12, &mut rng))?;
    let mut targets = vec![0.0f32; 12];
    for r in 0..3 {
        targets[r * 4 + rng.gen_range(0..4)] = 1.0;
    }
    let targets = Tensor::new(vec![3, 4], targets)?;
    out.push(check_loss("cross_entropy", &logits, SUITE_STEP, |z| {
        let (_, g) = loss::cross_entropy(z, &targets)?;
        let mut v = 0.0f64;
        for (row, y) in z.data().chunks(4).zip(targets.data().chunks(4)) {
            let lse = row.iter().map(|&a| (a as f64).exp()).sum::<f64>().ln();
            v -= row
                .iter()
                .zip(y)
                .map(|(&a, &t)| t as f64 * (a as f64 - lse))
                .sum::<f64>();
        }
        Ok((v / 3.0, g))
    })?);

    let probs = Tensor::new(vec![4, 1], (0..4).map(|_| rng.gen_range(0.1f32..0.9)).collect())?;
    let a: Vec<f32> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b: Vec<f32> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
    out.push(check_loss("log_likelihood_terms", &probs, SUITE_STEP, |d| {
        let (_, g) = loss::log_likelihood_terms(d, &a, &b)?;
        let v = d
            .data()
            .iter()
            .zip(a.iter().zip(&b))
            .map(|(&p, (&x, &y))| x as f64 * (p as f64).ln() + y as f64 * (1.0 - p as f64).ln())
            .sum();
        Ok((v, g))
    })?);
    Ok(out)
}
