//! Multi-discriminator adversarial embedding plus attribute meta-heads.
//!
//! A shared generator G maps every model's concatenated output vector to a
//! 128-d feature. One discriminator per source domain tries to tell its own
//! domain's features from all other domains'; G is trained to fool every
//! discriminator while the heads Φ classify attributes from the same
//! features.

mod nets;
mod objectives;

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, io, LayerGraph, Mode, OptimizerState, Tensor};
use crate::probing::OutputMatrix;
use crate::schema::{AttributeAssignment, AttributeSchema};

pub use nets::{
    build_discriminator, build_generator, discriminator_specs, generator_specs, head_specs, label_columns,
    param_checksum, MetaHeads, FEATURE_DIM, GENERATOR_HIDDEN, INIT_STD,
};
pub use objectives::{balanced_accuracy, discriminator_objective, generator_adversarial, generator_meta_objective};

pub(crate) use nets::{adam_for, derive_seed};

/// The candidate trade-off values searched on validation models.
pub const LAMBDA_GRID: [f32; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DreamConfig {
    /// Weight of the attribute cross-entropy in the generator objective.
    pub lambda: f32,
    /// Learning rate of the generator and the discriminators.
    pub alpha: f32,
    /// Learning rate of the meta-heads.
    pub beta: f32,
    /// Rows sampled per domain per step.
    pub batch_size: usize,
    /// Stop when the relative change of the epoch-mean L_c falls below this.
    pub epsilon: f64,
    pub max_epochs: usize,
    /// The stopping rule is not checked before this epoch. Near
    /// initialization the heads are uniform and L_c barely moves.
    #[serde(default = "default_min_epochs")]
    pub min_epochs: usize,
    /// Consecutive epochs below `epsilon` required to stop.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Steps per epoch; defaults to one pass over the largest domain.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    /// Use `−ln D` instead of `ln(1 − D)` as the generator's adversarial term.
    #[serde(default)]
    pub non_saturating: bool,
}

fn default_min_epochs() -> usize {
    30
}

fn default_patience() -> usize {
    3
}

impl Default for DreamConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 1e-5,
            beta: 1e-4,
            batch_size: 100,
            epsilon: 1e-4,
            max_epochs: 300,
            min_epochs: default_min_epochs(),
            patience: default_patience(),
            steps_per_epoch: None,
            seed: 0,
            non_saturating: false,
        }
    }
}

impl DreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return bad(format!(
                "learning rates must be positive, got alpha={} beta={}",
                self.alpha, self.beta
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Epoch mean of Σ_k CE_k.
    pub l_c: f64,
    /// Epoch mean of the generator's adversarial term.
    pub adversarial: f64,
    /// Epoch mean of each discriminator's value V_j.
    pub d_values: Vec<f64>,
    /// Balanced accuracy of each discriminator on the epoch's batches.
    pub d_accuracy: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NotTrained,
    Converged,
    MaxEpochs,
}

/// Attribute prediction for one output vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub assignment: AttributeAssignment,
    /// One probability vector per attribute.
    pub probs: Vec<Vec<f32>>,
}

pub(crate) fn predictions_from_heads(probs: &[Tensor]) -> Vec<Prediction> {
    let rows = probs.first().map_or(0, Tensor::batch);
    (0..rows)
        .map(|r| {
            let p: Vec<Vec<f32>> = probs.iter().map(|t| t.row(r).to_vec()).collect();
            Prediction {
                assignment: AttributeAssignment(p.iter().map(|v| argmax(v)).collect()),
                probs: p,
            }
        })
        .collect()
}

struct Optimizers {
    generator: OptimizerState,
    discriminators: Vec<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct DreamMeta {
    format_version: u32,
    config: DreamConfig,
    domains: Vec<String>,
    cardinalities: Vec<usize>,
    schema_hash: String,
    query_hash: String,
    input_width: usize,
    log: Vec<EpochLog>,
    stop: StopReason,
}

/// Generator, discriminator bank and meta-heads, plus the hashes that pin
/// the inference contract.
pub struct TrainedDream {
    pub config: DreamConfig,
    pub domains: Vec<String>,
    pub schema_hash: String,
    pub query_hash: String,
    pub generator: LayerGraph,
    pub discriminators: Vec<LayerGraph>,
    pub heads: MetaHeads,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
    optim: Option<Optimizers>,
}

impl std::fmt::Debug for TrainedDream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedDream")
            .field("domains", &self.domains)
            .field("input_width", &self.input_width())
            .field("epochs", &self.log.len())
            .field("stop", &self.stop)
            .finish()
    }
}

/// Draws `b` row indices from `rows`, without replacement when possible.
pub(crate) fn sample_batch(rows: &[usize], b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rows.len() >= b {
        sample(rng, rows.len(), b).into_iter().map(|i| rows[i]).collect()
    } else {
        (0..b).map(|_| rows[rng.gen_range(0..rows.len())]).collect()
    }
}

/// Relative change test used by the stopping rule.
pub(crate) fn converged(prev: f64, cur: f64, epsilon: f64) -> bool {
    (cur - prev).abs() / prev.abs().max(f64::MIN_POSITIVE) < epsilon
}

/// Epoch-level stopping rule shared with KENNEN*.
#[derive(Default)]
pub(crate) struct StopRule {
    prev: Option<f64>,
    streak: usize,
}

impl StopRule {
    pub(crate) fn observe(&mut self, epoch: usize, l_c: f64, config: &DreamConfig) -> bool {
        if self.prev.is_some_and(|p| converged(p, l_c, config.epsilon)) {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.prev = Some(l_c);
        epoch >= config.min_epochs && self.streak >= config.patience
    }
}

impl TrainedDream {
    /// Fresh model with every parameter drawn from N(0, 0.02).
    pub fn init(
        config: &DreamConfig,
        domains: &[String],
        schema: &AttributeSchema,
        input_width: usize,
        query_hash: &str,
    ) -> Result<Self> {
        config.validate()?;
        if domains.len() < 2 {
            return Err(Error::Config(format!(
                "adversarial training needs at least 2 source domains, got {}",
                domains.len()
            )));
        }
        if input_width == 0 {
            return Err(Error::Config("input width must be positive".into()));
        }
        let generator = build_generator(input_width, config.seed)?;
        let discriminators = (0..domains.len())
            .map(|j| build_discriminator(j, config.seed))
            .collect::<Result<Vec<_>>>()?;
        let heads = MetaHeads::new(&schema.cardinalities(), config.seed, config.beta)?;
        let optim = Optimizers {
            generator: adam_for(&[&generator], config.alpha),
            discriminators: discriminators.iter().map(|d| adam_for(&[d], config.alpha)).collect(),
        };
        Ok(Self {
            config: config.clone(),
            domains: domains.to_vec(),
            schema_hash: schema.hash(),
            query_hash: query_hash.to_string(),
            generator,
            discriminators,
            heads,
            log: Vec::new(),
            stop: StopReason::NotTrained,
            optim: Some(optim),
        })
    }

    pub fn input_width(&self) -> usize {
        self.generator.input_shape()[0]
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.heads.cardinalities()
    }

    fn optim(&mut self) -> Result<&mut Optimizers> {
        self.optim
            .as_mut()
            .ok_or_else(|| Error::Config("a loaded model cannot be trained further".into()))
    }

    /// Invariant features G(x) for `[rows, N·C]` inputs.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.generator.infer(x)
    }

    /// One ascent step of every discriminator on detached features. Returns
    /// each discriminator's value V_j and balanced accuracy before the step.
    pub fn discriminator_step(&mut self, batches: &[Tensor]) -> Result<Vec<(f64, f32)>> {
        self.optim()?;
        if batches.len() != self.discriminators.len() {
            return Err(Error::shape(
                "domain batches",
                &[self.discriminators.len()],
                &[batches.len()],
            ));
        }
        let feats = batches
            .iter()
            .map(|x| self.generator.infer(x))
            .collect::<Result<Vec<_>>>()?;
        let m = feats.len();
        let mut out = Vec::with_capacity(m);
        for j in 0..m {
            let mut parts: Vec<&Tensor> = vec![&feats[j]];
            parts.extend((0..m).filter(|&i| i != j).map(|i| &feats[i]));
            let x = Tensor::concat_rows(&parts)?;
            let d = &mut self.discriminators[j];
            d.zero_grad();
            let probs = d.forward(&x, Mode::Train)?;
            let pd = probs.data();
            let nr = feats[j].batch();
            let mut fakes = Vec::new();
            let mut off = nr;
            for p in &parts[1..] {
                fakes.push(&pd[off..off + p.batch()]);
                off += p.batch();
            }
            let (v, g) = discriminator_objective(&pd[..nr], &fakes)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("discriminator {j} objective")));
            }
            let acc = balanced_accuracy(&pd[..nr], &pd[nr..]);
            // ascent on V: descend on −V
            let upstream = Tensor::new(probs.shape().to_vec(), g.iter().map(|v| -v).collect())?;
            d.backward(&upstream)?;
            let mut params = self.discriminators[j].params_mut();
            self.optim.as_mut().expect("checked above").discriminators[j].step(&mut params)?;
            self.discriminators[j].zero_grad();
            out.push((v, acc));
        }
        Ok(out)
    }

    /// One joint descent step of G (rate α) and the heads (rate β) on
    /// `X* = ∪ batches`. Discriminator gradients are computed only to reach
    /// the features and are discarded. Returns (Σ_k CE_k, adversarial term).
    pub fn generator_step(&mut self, batches: &[Tensor], labels: &[Vec<usize>]) -> Result<(f32, f64)> {
        self.optim()?;
        let m = self.discriminators.len();
        if batches.len() != m {
            return Err(Error::shape("domain batches", &[m], &[batches.len()]));
        }
        let x = Tensor::concat_rows(&batches.iter().collect::<Vec<_>>())?;
        let sizes: Vec<usize> = batches.iter().map(Tensor::batch).collect();
        let starts: Vec<usize> = sizes
            .iter()
            .scan(0, |s, &n| {
                let o = *s;
                *s += n;
                Some(o)
            })
            .collect();
        self.generator.zero_grad();
        self.heads.zero_grad();
        let z = self.generator.forward(&x, Mode::Train)?;
        let width = z.item_len();
        let mut dz = Tensor::zeros(z.shape());
        let mut adversarial = 0.0;
        let non_saturating = self.config.non_saturating;
        for j in 0..m {
            let rows: Vec<usize> = (0..m)
                .filter(|&i| i != j)
                .flat_map(|i| starts[i]..starts[i] + sizes[i])
                .collect();
            let d = &mut self.discriminators[j];
            let probs = d.forward(&z.select_rows(&rows), Mode::Train)?;
            let pd = probs.data();
            let mut fakes = Vec::new();
            let mut off = 0;
            for i in (0..m).filter(|&i| i != j) {
                fakes.push(&pd[off..off + sizes[i]]);
                off += sizes[i];
            }
            let (v, g) = generator_adversarial(&fakes, non_saturating)?;
            adversarial += v;
            let dzj = d.backward(&Tensor::new(probs.shape().to_vec(), g)?)?;
            d.zero_grad();
            for (k, &r) in rows.iter().enumerate() {
                let dst = &mut dz.data_mut()[r * width..(r + 1) * width];
                for (a, b) in dst.iter_mut().zip(dzj.row(k)) {
                    *a += b;
                }
            }
        }
        let (l_c, mut dz_c) = self.heads.loss_and_backward(&z, labels)?;
        if !l_c.is_finite() || !adversarial.is_finite() {
            return Err(Error::NonFinite(format!(
                "generator step: L_c={l_c}, adversarial={adversarial}"
            )));
        }
        dz_c.scale(self.config.lambda);
        dz.add_assign(&dz_c)?;
        self.generator.backward(&dz)?;
        let mut params = self.generator.params_mut();
        self.optim
            .as_mut()
            .expect("checked above")
            .generator
            .step(&mut params)?;
        self.heads.step()?;
        self.generator.zero_grad();
        self.heads.zero_grad();
        Ok((l_c, adversarial))
    }

    /// Balanced accuracy of every discriminator, `D^j` taking domain `j`'s
    /// rows as real and all other rows as fake.
    pub fn discriminator_accuracy(&self, per_domain: &[Tensor]) -> Result<Vec<f32>> {
        let feats = per_domain
            .iter()
            .map(|x| self.generator.infer(x))
            .collect::<Result<Vec<_>>>()?;
        (0..self.discriminators.len())
            .map(|j| {
                let real = self.discriminators[j].infer(&feats[j])?;
                let fakes: Vec<&Tensor> = (0..feats.len()).filter(|&i| i != j).map(|i| &feats[i]).collect();
                let fake = self.discriminators[j].infer(&Tensor::concat_rows(&fakes)?)?;
                Ok(balanced_accuracy(real.data(), fake.data()))
            })
            .collect()
    }

    /// Predictions for `[rows, N·C]` output vectors.
    pub fn infer_batch(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_width() {
            return Err(Error::shape("dream input", &[x.batch(), self.input_width()], x.shape()));
        }
        Ok(predictions_from_heads(&self.heads.probs(&self.features(x)?)?))
    }

    pub fn infer(&self, vector: &[f32]) -> Result<Prediction> {
        let x = Tensor::new(vec![1, vector.len()], vector.to_vec())?;
        if vector.len() != self.input_width() {
            return Err(Error::shape("dream input", &[self.input_width()], &[vector.len()]));
        }
        Ok(self.infer_batch(&x)?.remove(0))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = self.generator.state();
        for d in &self.discriminators {
            records.extend(d.state());
        }
        for h in &self.heads.graphs {
            records.extend(h.state());
        }
        io::save_records(&dir.join("dream.drm"), &records)?;
        let meta = DreamMeta {
            format_version: 1,
            config: self.config.clone(),
            domains: self.domains.clone(),
            cardinalities: self.cardinalities(),
            schema_hash: self.schema_hash.clone(),
            query_hash: self.query_hash.clone(),
            input_width: self.input_width(),
            log: self.log.clone(),
            stop: self.stop,
        };
        io::write_atomic(&dir.join("dream.json"), &serde_json::to_vec_pretty(&meta)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("dream.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DreamMeta = serde_json::from_slice(&bytes)?;
        let records = io::load_records(&dir.join("dream.drm"))?;
        let mut generator = build_generator(meta.input_width, meta.config.seed)?;
        generator.load_state(&records)?;
        let mut discriminators = Vec::new();
        for j in 0..meta.domains.len() {
            let mut d = build_discriminator(j, meta.config.seed)?;
            d.load_state(&records)?;
            discriminators.push(d);
        }
        let mut heads = MetaHeads::new(&meta.cardinalities, meta.config.seed, meta.config.beta)?;
        for h in &mut heads.graphs {
            h.load_state(&records)?;
        }
        Ok(Self {
            config: meta.config,
            domains: meta.domains,
            schema_hash: meta.schema_hash,
            query_hash: meta.query_hash,
            generator,
            discriminators,
            heads,
            log: meta.log,
            stop: meta.stop,
            optim: None,
        })
    }
}

/// Row indices and label columns of each domain, in `domains` order.
pub(crate) fn group_rows(outputs: &OutputMatrix, domains: &[String], k: usize) -> Result<Vec<Vec<usize>>> {
    domains
        .iter()
        .map(|d| {
            let rows = outputs.rows_of(d);
            if rows.is_empty() {
                return Err(Error::Eval(format!("domain {d} has no output rows")));
            }
            if let Some(bad) = rows.iter().find(|&&r| outputs.meta[r].assignment.0.len() != k) {
                return Err(Error::Assignment(format!(
                    "row {} has a label of the wrong length",
                    outputs.meta[*bad].model_id
                )));
            }
            Ok(rows)
        })
        .collect()
}

/// Trains DREAM on the source-domain rows of `outputs`.
pub fn train(outputs: &OutputMatrix, schema: &AttributeSchema, config: &DreamConfig) -> Result<TrainedDream> {
    let domains = outputs.domains();
    let mut model = TrainedDream::init(config, &domains, schema, outputs.width(), &outputs.query_hash)?;
    let groups = group_rows(outputs, &domains, schema.len())?;
    let b = config.batch_size;
    let steps = config
        .steps_per_epoch
        .unwrap_or_else(|| groups.iter().map(Vec::len).max().unwrap_or(1).div_ceil(b));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 7));
    let m = domains.len();
    let mut rule = StopRule::default();
    for epoch in 1..=config.max_epochs {
        let mut l_c = 0.0;
        let mut adv = 0.0;
        let mut d_values = vec![0.0; m];
        let mut d_acc = vec![0.0f32; m];
        for _ in 0..steps {
            let picks: Vec<Vec<usize>> = groups.iter().map(|g| sample_batch(g, b, &mut rng)).collect();
            let batches: Vec<Tensor> = picks.iter().map(|p| outputs.tensor(p)).collect();
            for (j, (v, a)) in model.discriminator_step(&batches)?.into_iter().enumerate() {
                d_values[j] += v / steps as f64;
                d_acc[j] += a / steps as f32;
            }
            let all: Vec<&AttributeAssignment> = picks.iter().flatten().map(|&r| &outputs.meta[r].assignment).collect();
            let labels = label_columns(&all, schema.len());
            let (lc, a) = model.generator_step(&batches, &labels)?;
            l_c += lc as f64 / steps as f64;
            adv += a / steps as f64;
        }
        model.log.push(EpochLog {
            epoch,
            l_c,
            adversarial: adv,
            d_values,
            d_accuracy: d_acc,
        });
        tracing::debug!(epoch, l_c, adv, "dream epoch");
        if rule.observe(epoch, l_c, config) {
            model.stop = StopReason::Converged;
            return Ok(model);
        }
    }
    model.stop = StopReason::MaxEpochs;
    Ok(model)
}

#[cfg(test)]
mod tests;
