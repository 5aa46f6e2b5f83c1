//! White-box CNN construction, training and the persisted model zoo.

mod zoo;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DomainDataset, Split};
use crate::error::{Error, Result};
use crate::nn::{
    loss, Activation, Init, LayerGraph, LayerSpec, Mode, OptimizerConfig, OptimizerKind, OptimizerState, Tensor,
};
use crate::schema::{AttributeAssignment, AttributeSchema, ModelEntry};

pub use zoo::{
    build_zoo, load_model, load_zoo, BuildOptions, BuildReport, ModelRecord, ModelStatus, ZooHeader, ZooManifest,
    MANIFEST_FILE,
};

/// A white-box model identity: attribute assignment, seed and domain.
pub type WhiteBoxSpec = ModelEntry;

/// Stable identifier used for weight file names, e.g. `domain0-0.1.1-s3`.
pub fn model_id(spec: &WhiteBoxSpec) -> String {
    format!("{}-{}-s{}", spec.domain, spec.assignment.key(), spec.seed)
}

/// Channel schedule and widths shared by every white-box model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub first_channels: usize,
    pub max_channels: usize,
    pub fc_hidden: usize,
    pub dropout: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            first_channels: 16,
            max_channels: 64,
            fc_hidden: 128,
            dropout: 0.1,
        }
    }
}

impl ArchConfig {
    /// Output channels of conv layer `i` (0-based): doubling, then capped.
    pub fn channels(&self, i: usize) -> usize {
        let doubled = self
            .first_channels
            .saturating_mul(1usize.checked_shl(i as u32).unwrap_or(usize::MAX));
        doubled.min(self.max_channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub epochs: usize,
    pub lr_sgd: f32,
    pub lr_adaptive: f32,
    /// Caps the number of training images per model.
    #[serde(default)]
    pub max_train_images: Option<usize>,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr_sgd: 0.01,
            lr_adaptive: 0.001,
            max_train_images: None,
        }
    }
}

impl TrainBudget {
    pub fn lr_for(&self, kind: OptimizerKind) -> f32 {
        match kind {
            OptimizerKind::Sgd => self.lr_sgd,
            OptimizerKind::Adam | OptimizerKind::RmsProp => self.lr_adaptive,
        }
    }
}

/// Concrete architecture and training choices of one assignment. Attributes
/// missing from the schema take their default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedAttributes {
    pub activation: Activation,
    pub dropout: bool,
    pub pool: bool,
    pub kernel: usize,
    pub conv_layers: usize,
    pub fc_layers: usize,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub batchnorm: bool,
}

impl Default for ResolvedAttributes {
    fn default() -> Self {
        Self {
            activation: Activation::Relu,
            dropout: false,
            pool: true,
            kernel: 3,
            conv_layers: 2,
            fc_layers: 2,
            optimizer: OptimizerKind::Sgd,
            batch_size: 64,
            batchnorm: false,
        }
    }
}

fn parse_yes_no(short: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "yes" | "true" => Ok(true),
        "no" | "false" => Ok(false),
        _ => Err(Error::Assignment(format!("{short}: expected Yes/No, got {v:?}"))),
    }
}

fn parse_count(short: &str, v: &str) -> Result<usize> {
    match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::Assignment(format!(
            "{short}: expected a positive integer, got {v:?}"
        ))),
    }
}

impl ResolvedAttributes {
    pub fn resolve(schema: &AttributeSchema, a: &AttributeAssignment) -> Result<Self> {
        schema.check(a)?;
        let mut r = Self::default();
        for (attr, &i) in schema.attributes.iter().zip(&a.0) {
            let v = attr.values[i].as_str();
            let s = attr.short.as_str();
            match s {
                "act" => {
                    r.activation = match v.to_ascii_lowercase().as_str() {
                        "relu" => Activation::Relu,
                        "prelu" => Activation::Prelu,
                        "elu" => Activation::Elu,
                        "tanh" => Activation::Tanh,
                        "gelu" => Activation::Gelu,
                        _ => return Err(Error::Assignment(format!("act: unknown activation {v:?}"))),
                    }
                }
                "drop" => r.dropout = parse_yes_no(s, v)?,
                "pool" => r.pool = parse_yes_no(s, v)?,
                "bn" => r.batchnorm = parse_yes_no(s, v)?,
                "ks" => r.kernel = parse_count(s, v)?,
                "conv" => r.conv_layers = parse_count(s, v)?,
                "fc" => r.fc_layers = parse_count(s, v)?,
                "bs" => r.batch_size = parse_count(s, v)?,
                "opt" => {
                    r.optimizer = match v.to_ascii_lowercase().as_str() {
                        "sgd" => OptimizerKind::Sgd,
                        "adam" => OptimizerKind::Adam,
                        "rmsprop" => OptimizerKind::RmsProp,
                        _ => return Err(Error::Assignment(format!("opt: unknown optimizer {v:?}"))),
                    }
                }
                other => return Err(Error::Assignment(format!("no builder rule for attribute {other:?}"))),
            }
        }
        Ok(r)
    }
}

/// Layer list of the white-box CNN for `[channels, H, W]` inputs.
pub fn cnn_layers(
    r: &ResolvedAttributes,
    input_shape: &[usize],
    classes: usize,
    arch: &ArchConfig,
) -> Result<Vec<LayerSpec>> {
    let &[channels, mut h, mut w] = input_shape else {
        return Err(Error::Architecture(format!(
            "input shape {input_shape:?} is not [channels, H, W]"
        )));
    };
    let mut specs = Vec::new();
    let mut in_ch = channels;
    for i in 0..r.conv_layers {
        let out = arch.channels(i);
        specs.push(LayerSpec::Conv2d {
            in_channels: in_ch,
            out_channels: out,
            kernel: r.kernel,
        });
        if r.batchnorm {
            specs.push(LayerSpec::BatchNorm2d { channels: out });
        }
        if r.pool {
            if h < 2 || w < 2 {
                return Err(Error::Architecture(format!(
                    "spatial collapse: pooling after conv layer {} reduces {h}x{w} below 1",
                    i + 1
                )));
            }
            h /= 2;
            w /= 2;
            specs.push(LayerSpec::MaxPool2x2);
        }
        specs.push(LayerSpec::Activation { kind: r.activation });
        in_ch = out;
    }
    specs.push(LayerSpec::Flatten);
    let mut width = in_ch * h * w;
    for _ in 1..r.fc_layers {
        specs.push(LayerSpec::Linear {
            inputs: width,
            outputs: arch.fc_hidden,
        });
        specs.push(LayerSpec::Activation { kind: r.activation });
        if r.dropout {
            specs.push(LayerSpec::Dropout { rate: arch.dropout });
        }
        width = arch.fc_hidden;
    }
    specs.push(LayerSpec::Linear {
        inputs: width,
        outputs: classes,
    });
    Ok(specs)
}

/// Builds the white-box CNN, initialized fan-in normal from `seed`.
pub fn build_cnn(
    schema: &AttributeSchema,
    assignment: &AttributeAssignment,
    input_shape: &[usize],
    classes: usize,
    arch: &ArchConfig,
    seed: u64,
) -> Result<LayerGraph> {
    let r = ResolvedAttributes::resolve(schema, assignment)?;
    let specs = cnn_layers(&r, input_shape, classes, arch)?;
    LayerGraph::build("f", input_shape, &specs, Init::FanIn, seed)
}

/// What was actually used to train a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub lr: f32,
    pub epochs: usize,
    pub retried_with_lower_lr: bool,
}

/// A trained white-box model holding its best-validation weights.
#[derive(Debug)]
pub struct TrainedModel {
    pub spec: WhiteBoxSpec,
    pub graph: LayerGraph,
    pub best_val_accuracy: f32,
    pub best_epoch: usize,
    pub epochs_trained: usize,
    pub provenance: TrainProvenance,
}

impl TrainedModel {
    pub fn id(&self) -> String {
        model_id(&self.spec)
    }

    /// Eval-mode class probabilities for an `[n, ch, H, W]` batch.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        loss::softmax(&self.graph.infer(batch)?)
    }
}

/// Eval-mode accuracy of `graph` on the given images.
pub fn accuracy(graph: &LayerGraph, data: &DomainDataset, indices: &[usize]) -> Result<f32> {
    if indices.is_empty() {
        return Err(Error::Dataset(format!("{}: no images to evaluate", data.name)));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let logits = graph.infer(&data.batch_nchw(chunk))?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == data.labels[i])
            .count();
    }
    Ok(correct as f32 / indices.len() as f32)
}

fn train_once(
    spec: &WhiteBoxSpec,
    schema: &AttributeSchema,
    data: &DomainDataset,
    arch: &ArchConfig,
    budget: &TrainBudget,
    lr: f32,
) -> Result<(LayerGraph, f32, usize)> {
    let r = ResolvedAttributes::resolve(schema, &spec.assignment)?;
    let input_shape = [data.channels, data.height, data.width];
    let mut graph = build_cnn(
        schema,
        &spec.assignment,
        &input_shape,
        data.class_count(),
        arch,
        spec.seed,
    )?;
    let mut opt = OptimizerState::for_params(OptimizerConfig::new(r.optimizer, lr), &graph.params());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);

    let mut train = data.indices(Split::Train);
    if let Some(cap) = budget.max_train_images {
        train.truncate(cap);
    }
    let val = data.indices(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(format!("{}: train or val split is empty", data.name)));
    }

    let mut best: Option<(f32, usize, Vec<(String, Tensor)>)> = None;
    for epoch in 0..budget.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(r.batch_size) {
            let x = data.batch_nchw(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let logits = graph.forward(&x, Mode::Train)?;
            let (value, grad) = loss::cross_entropy(&logits, &loss::one_hot(&labels, data.class_count()))?;
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "{}: loss {value} in epoch {}",
                    model_id(spec),
                    epoch + 1
                )));
            }
            graph.zero_grad();
            graph.backward(&grad)?;
            let mut params = graph.params_mut();
            opt.step(&mut params).map_err(|e| match e {
                Error::NonFinite(m) => Error::Diverged(m),
                other => other,
            })?;
        }
        graph.clear_cache();
        let acc = accuracy(&graph, data, &val)?;
        if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
            best = Some((acc, epoch + 1, graph.state()));
        }
    }
    let (acc, epoch, state) = best.ok_or_else(|| Error::Config("training budget has zero epochs".into()))?;
    graph.load_state(&state)?;
    Ok((graph, acc, epoch))
}

/// Trains one white-box model and keeps its best-validation checkpoint.
///
/// A diverged run is retried once with a tenth of the learning rate; a
/// second divergence is returned as `Error::Diverged`.
pub fn train_white_box(
    spec: &WhiteBoxSpec,
    schema: &AttributeSchema,
    data: &DomainDataset,
    arch: &ArchConfig,
    budget: &TrainBudget,
) -> Result<TrainedModel> {
    if data.name != spec.domain {
        return Err(Error::Dataset(format!(
            "model {} belongs to domain {} but got dataset {}",
            model_id(spec),
            spec.domain,
            data.name
        )));
    }
    let r = ResolvedAttributes::resolve(schema, &spec.assignment)?;
    let base_lr = budget.lr_for(r.optimizer);
    let (result, lr, retried) = match train_once(spec, schema, data, arch, budget, base_lr) {
        Err(Error::Diverged(first)) => {
            tracing::warn!(model = %model_id(spec), "diverged ({first}), retrying with lr/10");
            let lr = base_lr / 10.0;
            (train_once(spec, schema, data, arch, budget, lr), lr, true)
        }
        other => (other, base_lr, false),
    };
    let (graph, best_val_accuracy, best_epoch) = result?;
    Ok(TrainedModel {
        spec: spec.clone(),
        graph,
        best_val_accuracy,
        best_epoch,
        epochs_trained: budget.epochs,
        provenance: TrainProvenance {
            optimizer: r.optimizer,
            batch_size: r.batch_size,
            lr,
            epochs: budget.epochs,
            retried_with_lower_lr: retried,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Attribute;

    fn table1() -> AttributeSchema {
        AttributeSchema::from_json(include_str!("../../../../assets/schemas/table1.json")).unwrap()
    }

    fn assignment(schema: &AttributeSchema, values: &[(&str, &str)]) -> AttributeAssignment {
        AttributeAssignment(
            schema
                .attributes
                .iter()
                .map(|a| {
                    let v = values.iter().find(|(s, _)| *s == a.short).map(|(_, v)| *v).unwrap();
                    a.values.iter().position(|x| x == v).unwrap()
                })
                .collect(),
        )
    }

    fn base(schema: &AttributeSchema) -> AttributeAssignment {
        assignment(
            schema,
            &[
                ("act", "ReLU"),
                ("drop", "No"),
                ("pool", "Yes"),
                ("ks", "3"),
                ("conv", "2"),
                ("fc", "2"),
                ("opt", "SGD"),
                ("bs", "64"),
                ("bn", "No"),
            ],
        )
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let s = table1();
        let g = build_cnn(&s, &base(&s), &[1, 32, 32], 7, &ArchConfig::default(), 0).unwrap();
        // conv 1->16 k3: 9*1*16+16 = 160; conv 16->32 k3: 9*16*32+32 = 4640
        // after two pools 32*8*8 = 2048 features; fc 2048->128: 262272; 128->7: 903
        assert_eq!(g.param_count(), 160 + 4640 + 262_272 + 903);
    }

    #[test]
    fn block_order_and_dropout_rate() {
        let s = table1();
        let mut a = base(&s);
        let drop = s.index_of("drop").unwrap();
        let bn = s.index_of("bn").unwrap();
        a.0[drop] = 0;
        a.0[bn] = 0;
        let g = build_cnn(&s, &a, &[1, 32, 32], 10, &ArchConfig::default(), 0).unwrap();
        assert_eq!(
            g.layer_names(),
            vec![
                "conv2d",
                "batchnorm2d",
                "maxpool2x2",
                "activation",
                "conv2d",
                "batchnorm2d",
                "maxpool2x2",
                "activation",
                "flatten",
                "linear",
                "activation",
                "dropout",
                "linear"
            ]
        );
        assert!(g.specs().contains(&LayerSpec::Dropout { rate: 0.1 }));
        assert_eq!(g.output_shape(), &[10]);
    }

    #[test]
    fn pool_no_means_no_pooling_layers() {
        let s = table1();
        let mut a = base(&s);
        a.0[s.index_of("pool").unwrap()] = 1;
        let g = build_cnn(&s, &a, &[1, 8, 8], 7, &ArchConfig::default(), 0).unwrap();
        assert!(!g.layer_names().contains(&"maxpool2x2"));
    }

    #[test]
    fn deep_pooling_collapses_small_inputs() {
        let s = table1();
        let mut a = base(&s);
        a.0[s.index_of("conv").unwrap()] = 2; // 4 conv layers
        let err = build_cnn(&s, &a, &[1, 4, 4], 7, &ArchConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("spatial collapse"), "{err}");
    }

    #[test]
    fn channel_schedule_doubles_then_caps() {
        let arch = ArchConfig::default();
        let ch: Vec<usize> = (0..5).map(|i| arch.channels(i)).collect();
        assert_eq!(ch, vec![16, 32, 64, 64, 64]);
    }

    #[test]
    fn unknown_attribute_has_no_builder_rule() {
        let s = AttributeSchema::new(vec![Attribute {
            name: "Width".into(),
            short: "width".into(),
            values: vec!["a".into(), "b".into()],
        }])
        .unwrap();
        assert!(ResolvedAttributes::resolve(&s, &AttributeAssignment(vec![0])).is_err());
    }

    fn two_class_domain() -> DomainDataset {
        // left half bright versus right half bright
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let label = i % 2;
            for _y in 0..8 {
                for x in 0..8 {
                    let on = (x < 4) == (label == 0);
                    let jitter = ((i * 31 + x * 7) % 10) as f32 / 50.0;
                    images.push(if on { 0.8 + jitter } else { jitter });
                }
            }
            labels.push(label);
        }
        DomainDataset::new("toy", (8, 8, 1), images, labels, vec!["l".into(), "r".into()]).unwrap()
    }

    fn toy_spec(opt: &str) -> (AttributeSchema, WhiteBoxSpec) {
        let s = table1();
        let mut a = base(&s);
        let k = s.index_of("opt").unwrap();
        a.0[k] = s.attributes[k].values.iter().position(|v| v == opt).unwrap();
        let spec = WhiteBoxSpec {
            assignment: a,
            seed: 3,
            domain: "toy".into(),
        };
        (s, spec)
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            first_channels: 4,
            max_channels: 8,
            fc_hidden: 16,
            dropout: 0.1,
        }
    }

    #[test]
    fn separable_domain_is_learned_and_provenance_recorded() {
        let data = two_class_domain();
        let (s, spec) = toy_spec("ADAM");
        let budget = TrainBudget {
            epochs: 5,
            ..Default::default()
        };
        let m = train_white_box(&spec, &s, &data, &small_arch(), &budget).unwrap();
        assert!(m.best_val_accuracy > 0.95, "{}", m.best_val_accuracy);
        assert_eq!(m.provenance.optimizer, OptimizerKind::Adam);
        assert_eq!(m.provenance.batch_size, 64);
        let again = accuracy(&m.graph, &data, &data.indices(Split::Val)).unwrap();
        assert_eq!(again, m.best_val_accuracy);
    }

    #[test]
    fn same_spec_trains_identically() {
        let data = two_class_domain();
        let (s, spec) = toy_spec("SGD");
        let budget = TrainBudget {
            epochs: 2,
            ..Default::default()
        };
        let a = train_white_box(&spec, &s, &data, &small_arch(), &budget).unwrap();
        let b = train_white_box(&spec, &s, &data, &small_arch(), &budget).unwrap();
        assert_eq!(a.best_val_accuracy, b.best_val_accuracy);
        assert_eq!(a.graph.state(), b.graph.state());
    }

    #[test]
    fn wrong_domain_is_rejected() {
        let data = two_class_domain();
        let (s, mut spec) = toy_spec("SGD");
        spec.domain = "other".into();
        assert!(train_white_box(&spec, &s, &data, &small_arch(), &TrainBudget::default()).is_err());
    }
}
