use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::io;
use super::layers::{build_layer, Init, Layer, LayerSpec, Parameter};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// An ordered stack of layers with shape compatibility checked at build time.
///
/// A graph is single-owner while training. `infer` takes `&self` and never
/// touches caches, so a trained graph can be shared across reader threads.
#[derive(Debug)]
pub struct LayerGraph {
    prefix: String,
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    layers: Vec<Box<dyn Layer>>,
    mode: Mode,
    dropout_rng: ChaCha8Rng,
    cached: bool,
}

impl LayerGraph {
    /// Builds the graph for per-item `input_shape`. Parameter ids are
    /// `"{prefix}.{layer}.{name}"`.
    pub fn build(prefix: &str, input_shape: &[usize], specs: &[LayerSpec], init: Init, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Architecture(format!("{prefix}: empty layer list")));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(1);
        let mut layers: Vec<Box<dyn Layer>> = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            let layer = build_layer(spec, &shape, &format!("{prefix}.{i}"), init, &mut init_rng)?;
            shape = layer.output_shape().to_vec();
            layers.push(layer);
        }
        Ok(Self {
            prefix: prefix.to_string(),
            specs: specs.to_vec(),
            input_shape: input_shape.to_vec(),
            layers,
            mode: Mode::Eval,
            dropout_rng,
            cached: false,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().expect("non-empty graph").output_shape()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Layer kinds in order, e.g. `["conv2d", "activation", ...]`.
    pub fn layer_names(&self) -> Vec<&'static str> {
        self.layers.iter().map(|l| l.name()).collect()
    }

    /// Restarts the dropout mask stream.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        self.dropout_rng.set_stream(1);
    }

    /// Runs the batch through every layer. In train mode the intermediates
    /// needed by `backward` are cached.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        self.mode = mode;
        match mode {
            Mode::Eval => {
                self.clear_cache();
                self.infer(batch)
            }
            Mode::Train => {
                self.cached = false;
                let mut x = std::borrow::Cow::Borrowed(batch);
                for layer in &mut self.layers {
                    let y = layer.forward_train(&x, &mut self.dropout_rng)?;
                    x = std::borrow::Cow::Owned(y);
                }
                let out = x.into_owned();
                out.ensure_finite(&format!("{} forward", self.prefix))?;
                self.cached = true;
                Ok(out)
            }
        }
    }

    /// Eval-mode forward without caching.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = std::borrow::Cow::Borrowed(batch);
        for layer in &self.layers {
            let y = layer.infer(&x)?;
            x = std::borrow::Cow::Owned(y);
        }
        let out = x.into_owned();
        out.ensure_finite(&format!("{} forward", self.prefix))?;
        Ok(out)
    }

    /// Back-propagates `upstream` (gradient w.r.t. the last forward's output),
    /// accumulating into every parameter's `grad`, and returns the gradient
    /// w.r.t. the graph input.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        if !std::mem::take(&mut self.cached) {
            return Err(Error::BackwardWithoutForward(self.prefix.clone()));
        }
        let mut g = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.cached = false;
        for layer in &mut self.layers {
            layer.clear_cache();
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Parameters and non-trainable buffers (batch-norm running statistics),
    /// in a stable order.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for p in layer.params() {
                out.push((p.id.clone(), p.value.clone()));
            }
            for (name, t) in layer.buffers() {
                out.push((format!("{}.{i}.{name}", self.prefix), t.clone()));
            }
        }
        out
    }

    /// Loads a state produced by `state` on an identically built graph.
    pub fn load_state(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor> = records.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let prefix = self.prefix.clone();
        let mut used = 0;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for p in layer.params_mut() {
                let t = lookup
                    .get(p.id.as_str())
                    .ok_or_else(|| Error::Architecture(format!("missing weight record {}", p.id)))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::shape(p.id.clone(), p.value.shape(), t.shape()));
                }
                p.value = (*t).clone();
                p.zero_grad();
                used += 1;
            }
            for (name, buf) in layer.buffers_mut() {
                let id = format!("{prefix}.{i}.{name}");
                let t = lookup
                    .get(id.as_str())
                    .ok_or_else(|| Error::Architecture(format!("missing weight record {id}")))?;
                if t.shape() != buf.shape() {
                    return Err(Error::shape(id, buf.shape(), t.shape()));
                }
                *buf = (*t).clone();
                used += 1;
            }
        }
        let ours = records
            .iter()
            .filter(|(k, _)| k.starts_with(&format!("{prefix}.")))
            .count();
        if ours != used {
            return Err(Error::Architecture(format!(
                "{prefix}: weight file has {ours} records for this graph, expected {used}"
            )));
        }
        self.clear_cache();
        Ok(())
    }

    pub fn save_weights(&self, path: &std::path::Path) -> Result<()> {
        io::save_records(path, &self.state())
    }

    pub fn load_weights(&mut self, path: &std::path::Path) -> Result<()> {
        let records = io::load_records(path)?;
        self.load_state(&records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn mlp() -> LayerGraph {
        LayerGraph::build(
            "m",
            &[3],
            &[
                LayerSpec::Linear { inputs: 3, outputs: 4 },
                LayerSpec::Activation { kind: Activation::Relu },
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Linear { inputs: 4, outputs: 2 },
            ],
            Init::FanIn,
            3,
        )
        .unwrap()
    }

    #[test]
    fn incompatible_shapes_rejected_at_build() {
        let err = LayerGraph::build(
            "bad",
            &[3],
            &[
                LayerSpec::Linear { inputs: 3, outputs: 4 },
                LayerSpec::Linear { inputs: 5, outputs: 2 },
            ],
            Init::FanIn,
            0,
        );
        assert!(matches!(err, Err(Error::Architecture(_))));
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let mut g = mlp();
        let up = Tensor::zeros(&[1, 2]);
        assert!(matches!(g.backward(&up), Err(Error::BackwardWithoutForward(_))));
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        g.forward(&x, Mode::Eval).unwrap();
        assert!(g.backward(&up).is_err());
        g.forward(&x, Mode::Train).unwrap();
        assert!(g.backward(&up).is_ok());
    }

    #[test]
    fn input_shape_mismatch_is_an_error() {
        let mut g = mlp();
        let x = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        assert!(matches!(g.forward(&x, Mode::Eval), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable() {
        let mut g = mlp();
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.2]).unwrap();
        let a = g.forward(&x, Mode::Eval).unwrap();
        let b = g.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn state_round_trips_through_a_fresh_graph() {
        let g = mlp();
        let mut other = LayerGraph::build("m", &[3], g.specs(), Init::FanIn, 99).unwrap();
        other.load_state(&g.state()).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(g.infer(&x).unwrap(), other.infer(&x).unwrap());
    }
}
