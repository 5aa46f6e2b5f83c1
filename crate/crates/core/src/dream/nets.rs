//! Network shapes shared by DREAM and the KENNEN* baseline.

use crate::datasets::splitmix64;
use crate::error::{Error, Result};
use crate::hashing::ContentHasher;
use crate::nn::{
    loss, Activation, Init, LayerGraph, LayerSpec, Mode, OptimizerConfig, OptimizerKind, OptimizerState, Tensor,
};

pub const GENERATOR_HIDDEN: usize = 500;
pub const FEATURE_DIM: usize = 128;
pub const INIT_STD: f32 = 0.02;

pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

fn relu() -> LayerSpec {
    LayerSpec::Activation { kind: Activation::Relu }
}

pub fn generator_specs(nc: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Linear {
            inputs: nc,
            outputs: GENERATOR_HIDDEN,
        },
        relu(),
        LayerSpec::Linear {
            inputs: GENERATOR_HIDDEN,
            outputs: FEATURE_DIM,
        },
    ]
}

pub fn discriminator_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Linear {
            inputs: FEATURE_DIM,
            outputs: 512,
        },
        relu(),
        LayerSpec::Linear {
            inputs: 512,
            outputs: 256,
        },
        relu(),
        LayerSpec::Linear {
            inputs: 256,
            outputs: 1,
        },
        LayerSpec::Sigmoid,
    ]
}

pub fn head_specs(cardinality: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Linear {
            inputs: FEATURE_DIM,
            outputs: 128,
        },
        relu(),
        LayerSpec::Linear {
            inputs: 128,
            outputs: 64,
        },
        relu(),
        LayerSpec::Linear {
            inputs: 64,
            outputs: cardinality,
        },
    ]
}

pub fn build_generator(nc: usize, seed: u64) -> Result<LayerGraph> {
    LayerGraph::build(
        "g",
        &[nc],
        &generator_specs(nc),
        Init::Normal { std: INIT_STD },
        derive_seed(seed, 1),
    )
}

pub fn build_discriminator(j: usize, seed: u64) -> Result<LayerGraph> {
    LayerGraph::build(
        &format!("d{j}"),
        &[FEATURE_DIM],
        &discriminator_specs(),
        Init::Normal { std: INIT_STD },
        derive_seed(seed, 100 + j as u64),
    )
}

/// SHA-256 over every parameter and buffer of `graphs`.
pub fn param_checksum(graphs: &[&LayerGraph]) -> String {
    let mut h = ContentHasher::new();
    for g in graphs {
        for (id, t) in g.state() {
            h.str(&id).f32s(t.data());
        }
    }
    h.finish()
}

/// The K meta-heads φ_k with their optimizer.
#[derive(Debug)]
pub struct MetaHeads {
    pub graphs: Vec<LayerGraph>,
    opt: OptimizerState,
}

impl MetaHeads {
    pub fn new(cardinalities: &[usize], seed: u64, lr: f32) -> Result<Self> {
        let graphs = cardinalities
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                LayerGraph::build(
                    &format!("h{k}"),
                    &[FEATURE_DIM],
                    &head_specs(n),
                    Init::Normal { std: INIT_STD },
                    derive_seed(seed, 1000 + k as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let opt = adam_for(&graphs.iter().collect::<Vec<_>>(), lr);
        Ok(Self { graphs, opt })
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.output_shape()[0]).collect()
    }

    /// Per-head probabilities for features `z`.
    pub fn probs(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        self.graphs.iter().map(|g| loss::softmax(&g.infer(z)?)).collect()
    }

    /// Σ_k cross-entropy of every head on `z`; accumulates head parameter
    /// gradients and returns the gradient with respect to `z`.
    pub fn loss_and_backward(&mut self, z: &Tensor, labels: &[Vec<usize>]) -> Result<(f32, Tensor)> {
        if labels.len() != self.graphs.len() {
            return Err(Error::shape("meta-head labels", &[self.graphs.len()], &[labels.len()]));
        }
        let mut total = 0.0;
        let mut dz = Tensor::zeros(z.shape());
        for (g, y) in self.graphs.iter_mut().zip(labels) {
            let logits = g.forward(z, Mode::Train)?;
            let n = logits.shape()[1];
            if y.len() != z.batch() || y.iter().any(|&v| v >= n) {
                return Err(Error::Assignment(format!("labels do not fit a head of width {n}")));
            }
            let (value, grad) = loss::cross_entropy(&logits, &loss::one_hot(y, n))?;
            total += value;
            dz.add_assign(&g.backward(&grad)?)?;
        }
        Ok((total, dz))
    }

    pub fn zero_grad(&mut self) {
        self.graphs.iter_mut().for_each(LayerGraph::zero_grad);
    }

    pub fn step(&mut self) -> Result<()> {
        let mut params: Vec<_> = self.graphs.iter_mut().flat_map(|g| g.params_mut()).collect();
        self.opt.step(&mut params)
    }
}

pub(crate) fn adam_for(graphs: &[&LayerGraph], lr: f32) -> OptimizerState {
    let params: Vec<_> = graphs.iter().flat_map(|g| g.params()).collect();
    OptimizerState::for_params(OptimizerConfig::new(OptimizerKind::Adam, lr), &params)
}

/// Per-attribute label columns for the given schema cardinalities.
pub fn label_columns(assignments: &[&crate::schema::AttributeAssignment], k: usize) -> Vec<Vec<usize>> {
    (0..k).map(|a| assignments.iter().map(|x| x.0[a]).collect()).collect()
}
