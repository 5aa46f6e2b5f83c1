//! Experiment configuration: one JSON file naming the schema, the domain
//! datasets, the zoo, the query set, DREAM hyperparameters and the
//! evaluation protocol.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dreamlab_core::datasets::{
    load_domain, make_synthetic_domains, DatasetFormat, DomainDataset, LoadOptions, SyntheticSpec,
};
use dreamlab_core::dream::{DreamConfig, LAMBDA_GRID};
use dreamlab_core::evalkit::{LodoConfig, Method};
use dreamlab_core::modelzoo::{ArchConfig, TrainBudget};
use dreamlab_core::schema::{AttributeSchema, SplitCounts, SplitRole};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: PathBuf,
    pub data: DataConfig,
    pub zoo: ZooConfig,
    pub queries: QueryConfig,
    #[serde(default)]
    pub dream: DreamConfig,
    pub eval: EvalConfig,
    /// Where `run` writes its report; relative to the config file.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Parallel white-box training and probing.
    #[serde(default = "one")]
    pub workers: usize,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Files(FileData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub domains: Vec<DomainSource>,
    pub image_size: (usize, usize),
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default)]
    pub classes: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSource {
    pub name: String,
    pub format: DatasetFormat,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooConfig {
    /// Per domain.
    pub counts: SplitCounts,
    /// Training seeds per attribute combination.
    pub seeds: u32,
    pub sample_seed: u64,
    #[serde(default)]
    pub disjoint_combos: bool,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub budget: TrainBudget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f32>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default = "test_only")]
    pub score_roles: Vec<SplitRole>,
    /// Also run the in-domain versus cross-domain KENNEN* comparison with
    /// this home domain.
    #[serde(default)]
    pub gap_home: Option<String>,
}

fn default_grid() -> Vec<f32> {
    LAMBDA_GRID.to_vec()
}

fn test_only() -> Vec<SplitRole> {
    vec![SplitRole::Test]
}

impl DataConfig {
    pub fn domain_names(&self) -> Vec<String> {
        match self {
            DataConfig::Synthetic(s) => (0..s.n_domains).map(|d| format!("domain{d}")).collect(),
            DataConfig::Files(f) => f.domains.iter().map(|d| d.name.clone()).collect(),
        }
    }

    pub fn load(&self) -> Result<Vec<DomainDataset>> {
        match self {
            DataConfig::Synthetic(s) => Ok(make_synthetic_domains(s)?),
            DataConfig::Files(f) => {
                let opts = LoadOptions {
                    image_size: f.image_size,
                    channels: f.channels,
                    classes: f.classes.clone(),
                };
                f.domains
                    .iter()
                    .map(|d| {
                        load_domain(&d.name, &d.path, d.format, &opts)
                            .with_context(|| format!("loading domain {} from {}", d.name, d.path.display()))
                    })
                    .collect()
            }
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let DataConfig::Files(f) = self {
            for d in &mut f.domains {
                d.path = base.join(&d.path);
            }
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            DataConfig::Synthetic(s) => s.validate()?,
            DataConfig::Files(f) => {
                if f.domains.is_empty() {
                    bail!("data.files.domains is empty");
                }
                for d in &f.domains {
                    if !d.path.exists() {
                        bail!(
                            "data.files.domains[{}].path: {} does not exist",
                            d.name,
                            d.path.display()
                        );
                    }
                }
            }
        }
        let names = self.domain_names();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                bail!("domain {n:?} is listed twice");
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Parses `path`, resolves relative paths against its directory and
    /// validates every section.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = std::fs::canonicalize(path)
            .ok()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("."));
        let base = base.as_path();
        cfg.schema = base.join(&cfg.schema);
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.data.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.schema.exists() {
            bail!("schema: {} does not exist", self.schema.display());
        }
        self.load_schema()?;
        self.data.check()?;
        if self.zoo.seeds == 0 {
            bail!("zoo.seeds must be at least 1");
        }
        if self.zoo.counts.total() == 0 {
            bail!("zoo.counts requests no models");
        }
        if self.zoo.budget.epochs == 0 {
            bail!("zoo.budget.epochs must be at least 1");
        }
        if self.queries.n == 0 {
            bail!("queries.n must be positive");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        let names = self.data.domain_names();
        for t in self.eval.targets.iter().chain(&self.eval.gap_home) {
            if !names.contains(t) {
                bail!("eval: domain {t:?} is not one of {names:?}");
            }
        }
        self.lodo().validate().context("eval")?;
        Ok(())
    }

    pub fn load_schema(&self) -> Result<AttributeSchema> {
        AttributeSchema::load(&self.schema).with_context(|| format!("schema {}", self.schema.display()))
    }

    pub fn lodo(&self) -> LodoConfig {
        LodoConfig {
            n_queries: self.queries.n,
            query_seed: self.queries.seed,
            trials: self.eval.trials,
            dream: self.dream.clone(),
            lambda_grid: self.eval.lambda_grid.clone(),
            methods: self.eval.methods.clone(),
            targets: self.eval.targets.clone(),
            score_roles: self.eval.score_roles.clone(),
        }
    }
}

/// Reads a DREAM config from either a bare `DreamConfig` JSON file or the
/// `dream` section of an experiment config.
pub fn load_dream_config(path: &Path) -> Result<DreamConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let section = value.get("dream").cloned().unwrap_or(value);
    let cfg: DreamConfig =
        serde_json::from_value(section).with_context(|| format!("{}: dream config", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}
