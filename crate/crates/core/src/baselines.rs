//! Reference methods: uniform random guessing and KENNEN*, a supervised
//! meta-model on pooled outputs with DREAM's embedding and head shapes but
//! no adversarial term.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dream::{
    adam_for, derive_seed, generator_specs, label_columns, predictions_from_heads, sample_batch, DreamConfig,
    MetaHeads, Prediction, StopReason, StopRule, INIT_STD,
};
use crate::error::{Error, Result};
use crate::nn::{io, Init, LayerGraph, Mode, OptimizerState, Tensor};
use crate::probing::OutputMatrix;
use crate::schema::{AttributeAssignment, AttributeSchema};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    /// `100 / N^k` per attribute, in schema order.
    pub per_attribute: Vec<f64>,
    pub average: f64,
}

/// Expected accuracy in percent of guessing every attribute uniformly.
pub fn random_expected_accuracy(schema: &AttributeSchema) -> RandomBaseline {
    let per_attribute: Vec<f64> = schema.cardinalities().iter().map(|&n| 100.0 / n as f64).collect();
    let average = per_attribute.iter().sum::<f64>() / per_attribute.len().max(1) as f64;
    RandomBaseline { per_attribute, average }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KennenLog {
    pub epoch: usize,
    pub l_c: f64,
}

pub struct KennenStarModel {
    pub config: DreamConfig,
    pub schema_hash: String,
    pub query_hash: String,
    pub embedding: LayerGraph,
    pub heads: MetaHeads,
    pub log: Vec<KennenLog>,
    pub stop: StopReason,
    optim: Option<OptimizerState>,
}

impl std::fmt::Debug for KennenStarModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KennenStarModel")
            .field("input_width", &self.input_width())
            .field("epochs", &self.log.len())
            .field("stop", &self.stop)
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct KennenMeta {
    format_version: u32,
    config: DreamConfig,
    cardinalities: Vec<usize>,
    schema_hash: String,
    query_hash: String,
    input_width: usize,
    log: Vec<KennenLog>,
    stop: StopReason,
}

fn build_embedding(nc: usize, seed: u64) -> Result<LayerGraph> {
    // same seed stream as the DREAM generator, so both start identical
    LayerGraph::build(
        "e",
        &[nc],
        &generator_specs(nc),
        Init::Normal { std: INIT_STD },
        derive_seed(seed, 1),
    )
}

impl KennenStarModel {
    pub fn init(config: &DreamConfig, schema: &AttributeSchema, input_width: usize, query_hash: &str) -> Result<Self> {
        config.validate()?;
        let embedding = build_embedding(input_width, config.seed)?;
        let heads = MetaHeads::new(&schema.cardinalities(), config.seed, config.beta)?;
        let optim = Some(adam_for(&[&embedding], config.alpha));
        Ok(Self {
            config: config.clone(),
            schema_hash: schema.hash(),
            query_hash: query_hash.to_string(),
            embedding,
            heads,
            log: Vec::new(),
            stop: StopReason::NotTrained,
            optim,
        })
    }

    pub fn input_width(&self) -> usize {
        self.embedding.input_shape()[0]
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.heads.cardinalities()
    }

    /// One supervised step on `x`; returns Σ_k CE_k.
    pub fn step(&mut self, x: &Tensor, labels: &[Vec<usize>]) -> Result<f32> {
        let opt = self
            .optim
            .as_mut()
            .ok_or_else(|| Error::Config("a loaded model cannot be trained further".into()))?;
        self.embedding.zero_grad();
        self.heads.zero_grad();
        let z = self.embedding.forward(x, Mode::Train)?;
        let (l_c, dz) = self.heads.loss_and_backward(&z, labels)?;
        if !l_c.is_finite() {
            return Err(Error::NonFinite(format!("KENNEN* loss {l_c}")));
        }
        self.embedding.backward(&dz)?;
        let mut params = self.embedding.params_mut();
        opt.step(&mut params)?;
        self.heads.step()?;
        self.embedding.zero_grad();
        self.heads.zero_grad();
        Ok(l_c)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.embedding.infer(x)
    }

    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_width() {
            return Err(Error::shape(
                "KENNEN* input",
                &[x.batch(), self.input_width()],
                x.shape(),
            ));
        }
        Ok(predictions_from_heads(&self.heads.probs(&self.features(x)?)?))
    }

    pub fn predict(&self, vector: &[f32]) -> Result<Prediction> {
        if vector.len() != self.input_width() {
            return Err(Error::shape("KENNEN* input", &[self.input_width()], &[vector.len()]));
        }
        let x = Tensor::new(vec![1, vector.len()], vector.to_vec())?;
        Ok(self.predict_batch(&x)?.remove(0))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = self.embedding.state();
        for h in &self.heads.graphs {
            records.extend(h.state());
        }
        io::save_records(&dir.join("kennen.drm"), &records)?;
        let meta = KennenMeta {
            format_version: 1,
            config: self.config.clone(),
            cardinalities: self.cardinalities(),
            schema_hash: self.schema_hash.clone(),
            query_hash: self.query_hash.clone(),
            input_width: self.input_width(),
            log: self.log.clone(),
            stop: self.stop,
        };
        io::write_atomic(&dir.join("kennen.json"), &serde_json::to_vec_pretty(&meta)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("kennen.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: KennenMeta = serde_json::from_slice(&bytes)?;
        let records = io::load_records(&dir.join("kennen.drm"))?;
        let mut embedding = build_embedding(meta.input_width, meta.config.seed)?;
        embedding.load_state(&records)?;
        let mut heads = MetaHeads::new(&meta.cardinalities, meta.config.seed, meta.config.beta)?;
        for h in &mut heads.graphs {
            h.load_state(&records)?;
        }
        Ok(Self {
            config: meta.config,
            schema_hash: meta.schema_hash,
            query_hash: meta.query_hash,
            embedding,
            heads,
            log: meta.log,
            stop: meta.stop,
            optim: None,
        })
    }
}

/// Trains KENNEN* on all rows of `outputs`, ignoring domain tags. Each step
/// draws `b·M` rows from the pool, M being the number of domains present,
/// so it sees as many rows per step as DREAM.
pub fn kennen_star_train(
    outputs: &OutputMatrix,
    schema: &AttributeSchema,
    config: &DreamConfig,
) -> Result<KennenStarModel> {
    if outputs.is_empty() {
        return Err(Error::Eval("KENNEN* needs at least one output row".into()));
    }
    let k = schema.len();
    if let Some(bad) = outputs.meta.iter().find(|m| m.assignment.0.len() != k) {
        return Err(Error::Assignment(format!(
            "row {} has a label of the wrong length",
            bad.model_id
        )));
    }
    let mut model = KennenStarModel::init(config, schema, outputs.width(), &outputs.query_hash)?;
    let m = outputs.domains().len().max(1);
    let rows: Vec<usize> = (0..outputs.len()).collect();
    let per_step = config.batch_size * m;
    let steps = config
        .steps_per_epoch
        .unwrap_or_else(|| rows.len().div_ceil(per_step).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 7));
    let mut rule = StopRule::default();
    for epoch in 1..=config.max_epochs {
        let mut l_c = 0.0;
        for _ in 0..steps {
            let pick = sample_batch(&rows, per_step, &mut rng);
            let all: Vec<&AttributeAssignment> = pick.iter().map(|&r| &outputs.meta[r].assignment).collect();
            l_c += model.step(&outputs.tensor(&pick), &label_columns(&all, k))? as f64 / steps as f64;
        }
        model.log.push(KennenLog { epoch, l_c });
        if rule.observe(epoch, l_c, config) {
            model.stop = StopReason::Converged;
            return Ok(model);
        }
    }
    model.stop = StopReason::MaxEpochs;
    Ok(model)
}

pub fn kennen_star_predict(model: &KennenStarModel, vector: &[f32]) -> Result<Prediction> {
    model.predict(vector)
}
