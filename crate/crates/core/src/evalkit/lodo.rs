use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{attribute_accuracy, AccuracyRow, AuditLog, EvalReport, Method, Phase, TrialResult};
use crate::baselines::{kennen_star_train, random_expected_accuracy};
use crate::datasets::DomainDataset;
use crate::dream::{self, DreamConfig, Prediction, TrainedDream, LAMBDA_GRID};
use crate::error::{Error, Result};
use crate::modelzoo::{load_zoo, TrainedModel};
use crate::probing::{harvest, query_black_box, OutputMatrix, QuerySet};
use crate::schema::{AttributeAssignment, AttributeSchema, SplitRole};

#[derive(Debug)]
pub struct PooledModel {
    pub role: SplitRole,
    pub model: TrainedModel,
}

/// White-box models of every domain, with the schema they were built from.
#[derive(Debug)]
pub struct ModelPool {
    pub schema: AttributeSchema,
    pub models: Vec<PooledModel>,
}

impl ModelPool {
    pub fn new(schema: AttributeSchema, models: Vec<PooledModel>) -> Result<Self> {
        for m in &models {
            schema.check(&m.model.spec.assignment)?;
        }
        Ok(Self { schema, models })
    }

    /// Loads one or more zoo directories. All must share a schema.
    pub fn load(dirs: &[&Path]) -> Result<Self> {
        let mut schema: Option<AttributeSchema> = None;
        let mut models = Vec::new();
        for dir in dirs {
            let (manifest, trained) = load_zoo(dir)?;
            match &schema {
                None => schema = Some(manifest.header.schema.clone()),
                Some(s) if s.hash() != manifest.header.schema_hash => {
                    return Err(Error::Schema(format!(
                        "{} uses a different attribute schema",
                        dir.display()
                    )));
                }
                Some(_) => {}
            }
            for (record, model) in manifest.ok_records().zip(trained) {
                models.push(PooledModel {
                    role: record.role,
                    model,
                });
            }
        }
        let schema = schema.ok_or_else(|| Error::Manifest("no zoo directories given".into()))?;
        Self::new(schema, models)
    }

    /// Domains in order of first appearance.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for m in &self.models {
            if !out.contains(&m.model.spec.domain) {
                out.push(m.model.spec.domain.clone());
            }
        }
        out
    }

    pub fn select(&self, domain: &str, role: SplitRole) -> Vec<&TrainedModel> {
        self.models
            .iter()
            .filter(|m| m.role == role && m.model.spec.domain == domain)
            .map(|m| &m.model)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LodoConfig {
    pub n_queries: usize,
    pub query_seed: u64,
    pub trials: usize,
    pub dream: DreamConfig,
    /// λ values tried on source validation models; empty means use
    /// `dream.lambda` as is.
    #[serde(default)]
    pub lambda_grid: Vec<f32>,
    pub methods: Vec<Method>,
    /// Domains to hold out in turn; empty means every domain.
    #[serde(default)]
    pub targets: Vec<String>,
    /// Which of the held-out domain's models are scored. None of them is
    /// used for training in that run, whatever its role.
    #[serde(default = "test_role")]
    pub score_roles: Vec<SplitRole>,
}

fn test_role() -> Vec<SplitRole> {
    vec![SplitRole::Test]
}

impl Default for LodoConfig {
    fn default() -> Self {
        Self {
            n_queries: 100,
            query_seed: 0,
            trials: 10,
            dream: DreamConfig::default(),
            lambda_grid: LAMBDA_GRID.to_vec(),
            methods: vec![Method::Dream, Method::Kennen, Method::Random],
            targets: Vec::new(),
            score_roles: test_role(),
        }
    }
}

impl LodoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.n_queries == 0 {
            return Err(Error::Config("n_queries must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.score_roles.is_empty() {
            return Err(Error::Config("score_roles is empty".into()));
        }
        if let Some(bad) = self.lambda_grid.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::Config(format!("lambda grid value {bad} must be positive")));
        }
        self.dream.validate()
    }

    pub fn trial_seeds(&self, trial: usize) -> TrialSeeds {
        TrialSeeds {
            query: self.query_seed.wrapping_add(trial as u64),
            init: self.dream.seed.wrapping_add(trial as u64),
        }
    }
}

/// Seeds that vary between trials; the white-box zoo is shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSeeds {
    pub query: u64,
    pub init: u64,
}

#[derive(Debug)]
pub struct LambdaSelection {
    pub lambda: f32,
    pub model: TrainedDream,
    /// Average validation accuracy per λ, in grid order.
    pub scores: Vec<(f32, f64)>,
}

fn truths(outputs: &OutputMatrix) -> Vec<AttributeAssignment> {
    outputs.meta.iter().map(|m| m.assignment.clone()).collect()
}

fn assignments(preds: Vec<Prediction>) -> Vec<AttributeAssignment> {
    preds.into_iter().map(|p| p.assignment).collect()
}

fn all_rows(outputs: &OutputMatrix) -> Vec<usize> {
    (0..outputs.len()).collect()
}

/// Trains DREAM once per λ on `train` and keeps the model with the best
/// average accuracy on `val`. Ties keep the earlier grid value.
pub fn select_lambda(
    train: &OutputMatrix,
    val: &OutputMatrix,
    schema: &AttributeSchema,
    base: &DreamConfig,
    grid: &[f32],
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if val.is_empty() {
        return Err(Error::Eval("lambda selection needs source validation models".into()));
    }
    let mut best: Option<(f64, f32, TrainedDream)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = DreamConfig { lambda, ..base.clone() };
        let model = dream::train(train, schema, &cfg)?;
        let preds = assignments(model.infer_batch(&val.tensor(&all_rows(val)))?);
        let acc = attribute_accuracy(&preds, &truths(val))?.average;
        tracing::info!(lambda, val_accuracy = acc, "lambda candidate");
        scores.push((lambda, acc));
        if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
            best = Some((acc, lambda, model));
        }
    }
    let (_, lambda, model) = best.expect("grid is not empty");
    Ok(LambdaSelection { lambda, model, scores })
}

fn dataset<'a>(datasets: &'a [DomainDataset], name: &str) -> Result<&'a DomainDataset> {
    datasets
        .iter()
        .find(|d| d.name == name)
        .ok_or_else(|| Error::Dataset(format!("no dataset for domain {name:?}")))
}

fn harvest_role(
    pool: &ModelPool,
    domains: &[String],
    role: SplitRole,
    q: &QuerySet,
    audit: &mut AuditLog,
    target: &str,
    trial: usize,
) -> Result<OutputMatrix> {
    let mut models = Vec::new();
    for d in domains {
        let picked = pool.select(d, role);
        audit.read(
            target,
            trial,
            Phase::Training,
            d,
            &format!("{role:?} white boxes").to_lowercase(),
            picked.len(),
        )?;
        models.extend(picked);
    }
    if models.is_empty() {
        return Ok(OutputMatrix::new(q.len(), 0, q.hash.clone()));
    }
    harvest(&models, q)
}

/// Queries every test model of `target` through the black-box interface.
fn score_black_boxes(models: &[&TrainedModel], q: &QuerySet) -> Result<OutputMatrix> {
    let vectors: Vec<Vec<f32>> = models
        .par_iter()
        .map(|m| query_black_box(*m, q, &q.hash))
        .collect::<Result<_>>()?;
    let classes = vectors.first().map_or(0, |v| v.len() / q.len().max(1));
    let mut out = OutputMatrix::new(q.len(), classes, q.hash.clone());
    for (m, v) in models.iter().zip(vectors) {
        out.push(
            crate::probing::OutputRowMeta {
                model_id: m.id(),
                domain: m.spec.domain.clone(),
                assignment: m.spec.assignment.clone(),
            },
            v,
        )?;
    }
    Ok(out)
}

/// Holds out each target domain in turn: builds queries from the source
/// domains, trains every requested method on source outputs, then scores
/// the target's test models queried as black boxes.
pub fn leave_one_domain_out(
    pool: &ModelPool,
    datasets: &[DomainDataset],
    config: &LodoConfig,
    audit: &mut AuditLog,
) -> Result<Vec<EvalReport>> {
    config.validate()?;
    let schema = &pool.schema;
    let domains = pool.domains();
    if domains.len() < 2 {
        return Err(Error::Eval(format!(
            "leave-one-domain-out needs at least 2 domains, found {}",
            domains.len()
        )));
    }
    if domains.len() == 2 {
        tracing::warn!("only 2 domains: a single source domain per run, DREAM is skipped");
    }
    let targets = if config.targets.is_empty() {
        domains.clone()
    } else {
        config.targets.clone()
    };
    let snapshot = serde_json::to_value(config)?;
    let shorts: Vec<String> = schema.shorts().iter().map(|s| s.to_string()).collect();
    let random = random_expected_accuracy(schema);
    let mut reports = Vec::new();

    for target in &targets {
        if !domains.contains(target) {
            return Err(Error::Eval(format!("held-out domain {target:?} has no models")));
        }
        let sources: Vec<String> = domains.iter().filter(|d| *d != target).cloned().collect();
        let run_dream = config.methods.contains(&Method::Dream) && sources.len() >= 2;
        if config.methods.contains(&Method::Dream) && !run_dream {
            tracing::warn!(target = %target, "DREAM needs two source domains; skipped");
        }
        let mut per_method: Vec<(Method, Vec<TrialResult>)> = Vec::new();
        for trial in 0..config.trials {
            let seeds = config.trial_seeds(trial);
            let mut src_data = Vec::new();
            for s in &sources {
                audit.read(
                    target,
                    trial,
                    Phase::Training,
                    s,
                    "query images",
                    config.n_queries / sources.len(),
                )?;
                src_data.push(dataset(datasets, s)?);
            }
            let q = QuerySet::build(&src_data, config.n_queries, seeds.query)?;
            let train = harvest_role(pool, &sources, SplitRole::Train, &q, audit, target, trial)?;
            if train.is_empty() {
                return Err(Error::Eval(format!("no source training models for held-out {target}")));
            }
            let cfg = DreamConfig {
                seed: seeds.init,
                ..config.dream.clone()
            };

            let dream_model = if run_dream {
                if config.lambda_grid.is_empty() {
                    Some((dream::train(&train, schema, &cfg)?, None))
                } else {
                    let val = harvest_role(pool, &sources, SplitRole::Val, &q, audit, target, trial)?;
                    let sel = select_lambda(&train, &val, schema, &cfg, &config.lambda_grid)?;
                    Some((sel.model, Some(sel.lambda)))
                }
            } else {
                None
            };
            let kennen = if config.methods.contains(&Method::Kennen) {
                Some(kennen_star_train(&train, schema, &cfg)?)
            } else {
                None
            };

            let tests: Vec<&TrainedModel> = config
                .score_roles
                .iter()
                .flat_map(|&r| pool.select(target, r))
                .collect();
            audit.read(
                target,
                trial,
                Phase::Scoring,
                target,
                "held-out black boxes",
                tests.len(),
            )?;
            if tests.is_empty() {
                return Err(Error::Eval(format!("held-out domain {target} has no models to score")));
            }
            let scored = score_black_boxes(&tests, &q)?;
            let x = scored.tensor(&all_rows(&scored));
            let truth = truths(&scored);
            for &method in &config.methods {
                let (row, lambda) = match method {
                    Method::Dream => match &dream_model {
                        Some((m, lambda)) => (attribute_accuracy(&assignments(m.infer_batch(&x)?), &truth)?, *lambda),
                        None => continue,
                    },
                    Method::Kennen => {
                        let m = kennen.as_ref().expect("trained above");
                        (attribute_accuracy(&assignments(m.predict_batch(&x)?), &truth)?, None)
                    }
                    Method::Random => (AccuracyRow::from_cells(random.per_attribute.clone()), None),
                };
                let result = TrialResult {
                    seeds,
                    per_attribute: row.per_attribute,
                    average: row.average,
                    lambda,
                };
                match per_method.iter_mut().find(|(m, _)| *m == method) {
                    Some((_, v)) => v.push(result),
                    None => per_method.push((method, vec![result])),
                }
            }
            tracing::info!(target = %target, trial, "trial scored");
        }
        for (method, trials) in per_method {
            let rows: Vec<AccuracyRow> = trials
                .iter()
                .map(|t| AccuracyRow::from_cells(t.per_attribute.clone()))
                .collect();
            let mean = AccuracyRow::mean(&rows)?;
            let report = EvalReport {
                domain: target.clone(),
                method,
                attributes: shorts.clone(),
                per_attribute: mean.per_attribute,
                average: mean.average,
                trials,
                config: snapshot.clone(),
            };
            report.check()?;
            reports.push(report);
        }
    }
    Ok(reports)
}

/// KENNEN* trained on one domain, scored on that domain's test models and
/// on every other domain's test models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub home: String,
    pub in_domain: AccuracyRow,
    pub cross_domain: AccuracyRow,
    /// `in_domain.average − cross_domain.average`.
    pub gap: f64,
    pub trials: Vec<(TrialSeeds, AccuracyRow, AccuracyRow)>,
}

pub fn in_domain_gap(
    pool: &ModelPool,
    datasets: &[DomainDataset],
    home: &str,
    config: &LodoConfig,
) -> Result<GapReport> {
    config.validate()?;
    let schema = &pool.schema;
    let others: Vec<String> = pool.domains().into_iter().filter(|d| d != home).collect();
    if others.is_empty() {
        return Err(Error::Eval("the gap experiment needs a second domain".into()));
    }
    let home_data = dataset(datasets, home)?;
    let train_models = pool.select(home, SplitRole::Train);
    let held_in = pool.select(home, SplitRole::Test);
    let held_out: Vec<&TrainedModel> = others.iter().flat_map(|d| pool.select(d, SplitRole::Test)).collect();
    if train_models.is_empty() || held_in.is_empty() || held_out.is_empty() {
        return Err(Error::Eval("the gap experiment needs train and test models".into()));
    }
    let mut trials = Vec::new();
    for trial in 0..config.trials {
        let seeds = config.trial_seeds(trial);
        let q = QuerySet::build(&[home_data], config.n_queries, seeds.query)?;
        let train = harvest(&train_models, &q)?;
        let model = kennen_star_train(
            &train,
            schema,
            &DreamConfig {
                seed: seeds.init,
                ..config.dream.clone()
            },
        )?;
        let score = |models: &[&TrainedModel]| -> Result<AccuracyRow> {
            let out = score_black_boxes(models, &q)?;
            attribute_accuracy(
                &assignments(model.predict_batch(&out.tensor(&all_rows(&out)))?),
                &truths(&out),
            )
        };
        trials.push((seeds, score(&held_in)?, score(&held_out)?));
    }
    let in_domain = AccuracyRow::mean(&trials.iter().map(|t| t.1.clone()).collect::<Vec<_>>())?;
    let cross_domain = AccuracyRow::mean(&trials.iter().map(|t| t.2.clone()).collect::<Vec<_>>())?;
    Ok(GapReport {
        home: home.to_string(),
        gap: in_domain.average - cross_domain.average,
        in_domain,
        cross_domain,
        trials,
    })
}
