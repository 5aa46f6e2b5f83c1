//! Cached pipeline stages. Each stage lives in `<cache>/<stage>-<key>/`
//! where the key hashes the stage name, the config sections it reads and
//! the keys of upstream stages. A stage directory is complete once its
//! `provenance.json` exists.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use dreamlab_core::datasets::DomainDataset;
use dreamlab_core::evalkit::{in_domain_gap, leave_one_domain_out, write_reports, AuditLog, ModelPool};
use dreamlab_core::hashing::sha256_hex;
use dreamlab_core::modelzoo::{build_zoo, BuildOptions, MANIFEST_FILE};
use dreamlab_core::nn::io::write_atomic;
use dreamlab_core::schema::{enumerate_grid, sample_modelset, ModelsetSplit};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DataConfig, ExperimentConfig};

pub const CACHE_ENV: &str = "DREAMLAB_CACHE_DIR";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const DATA_FILE: &str = "data.json";

/// `git describe` of the build, or "unknown" outside a checkout.
pub fn git_describe() -> &'static str {
    env!("DREAMLAB_GIT_DESCRIBE")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub key: String,
    pub config_hash: String,
    pub git_describe: String,
    #[serde(default)]
    pub upstream: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageOutcome {
    pub dir: PathBuf,
    pub key: String,
    pub cached: bool,
}

pub fn cache_root(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.out_dir.join("cache"),
    }
}

/// Hash of the whole resolved config; stamped into every artifact.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

fn stage_key(stage: &str, parts: &serde_json::Value) -> String {
    let text = serde_json::to_vec(&json!({ "stage": stage, "parts": parts })).expect("json serializes");
    sha256_hex(&text)[..16].to_string()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_provenance(dir: &Path, p: &Provenance) -> Result<()> {
    write_json(&dir.join(PROVENANCE_FILE), p)
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(PROVENANCE_FILE).exists()
}

/// Records how the zoo's datasets are obtained so later stages can rebuild
/// query sets from the same images.
pub fn write_data_file(zoo: &Path, data: &DataConfig) -> Result<()> {
    write_json(&zoo.join(DATA_FILE), data)
}

pub fn read_data_file(zoo: &Path) -> Result<DataConfig> {
    let path = zoo.join(DATA_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// One split per domain, sampled with `sample_seed + domain index`.
pub fn sample_split(cfg: &ExperimentConfig) -> Result<ModelsetSplit> {
    let schema = cfg.load_schema()?;
    let grid = enumerate_grid(&schema)?;
    let parts = cfg
        .data
        .domain_names()
        .iter()
        .enumerate()
        .map(|(i, d)| {
            sample_modelset(
                &grid,
                cfg.zoo.seeds,
                cfg.zoo.counts,
                cfg.zoo.sample_seed + i as u64,
                d,
                cfg.zoo.disjoint_combos,
            )
        })
        .collect::<dreamlab_core::Result<Vec<_>>>()?;
    Ok(ModelsetSplit::merge(parts))
}

fn zoo_key(cfg: &ExperimentConfig) -> Result<String> {
    let schema = std::fs::read(&cfg.schema).with_context(|| format!("reading {}", cfg.schema.display()))?;
    Ok(stage_key(
        "zoo",
        &json!({ "schema": sha256_hex(&schema), "data": cfg.data, "zoo": cfg.zoo }),
    ))
}

/// Trains (or resumes) the zoo for `cfg`.
pub fn zoo_stage(cfg: &ExperimentConfig, datasets: &[DomainDataset]) -> Result<StageOutcome> {
    let key = zoo_key(cfg)?;
    let dir = cache_root(cfg).join(format!("zoo-{key}"));
    if is_complete(&dir) {
        return Ok(StageOutcome { dir, key, cached: true });
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let split = sample_split(cfg)?;
    let schema = cfg.load_schema()?;
    let t = Instant::now();
    let report = build_zoo(
        &dir,
        &split,
        &schema,
        datasets,
        &cfg.zoo.arch,
        &cfg.zoo.budget,
        &BuildOptions {
            workers: cfg.workers,
            limit: None,
        },
    )
    .context("zoo stage")?;
    tracing::info!(
        trained = report.trained,
        failed = report.failed,
        skipped = report.skipped,
        secs = t.elapsed().as_secs_f64(),
        "zoo built"
    );
    write_data_file(&dir, &cfg.data)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_provenance(
        &dir,
        &Provenance {
            stage: "zoo".into(),
            key: key.clone(),
            config_hash: config_hash(cfg),
            git_describe: git_describe().into(),
            upstream: Vec::new(),
        },
    )?;
    Ok(StageOutcome {
        dir,
        key,
        cached: false,
    })
}

/// Runs leave-one-domain-out (and the optional in-domain gap) on a zoo.
pub fn eval_stage(cfg: &ExperimentConfig, zoo: &StageOutcome, datasets: &[DomainDataset]) -> Result<StageOutcome> {
    let manifest = std::fs::read(zoo.dir.join(MANIFEST_FILE)).context("reading the zoo manifest")?;
    let key = stage_key(
        "eval",
        &json!({
            "zoo": zoo.key,
            "manifest": sha256_hex(&manifest),
            "queries": cfg.queries,
            "dream": cfg.dream,
            "eval": cfg.eval,
        }),
    );
    let dir = cache_root(cfg).join(format!("eval-{key}"));
    if is_complete(&dir) {
        return Ok(StageOutcome { dir, key, cached: true });
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let pool = ModelPool::load(&[zoo.dir.as_path()]).context("eval stage")?;
    let lodo = cfg.lodo();
    let mut audit = AuditLog::new();
    let reports = leave_one_domain_out(&pool, datasets, &lodo, &mut audit).context("eval stage")?;
    write_reports(&dir, &reports)?;
    audit.save(&dir.join("audit.jsonl"))?;
    if let Some(home) = &cfg.eval.gap_home {
        let gap = in_domain_gap(&pool, datasets, home, &lodo).context("eval stage: in-domain gap")?;
        write_json(&dir.join("gap.json"), &gap)?;
    }
    write_json(&dir.join("config.json"), cfg)?;
    write_provenance(
        &dir,
        &Provenance {
            stage: "eval".into(),
            key: key.clone(),
            config_hash: config_hash(cfg),
            git_describe: git_describe().into(),
            upstream: vec![format!("zoo-{}", zoo.key)],
        },
    )?;
    tracing::info!(reports = reports.len(), "evaluation finished");
    Ok(StageOutcome {
        dir,
        key,
        cached: false,
    })
}

/// Copies every file of `from` into `to` (flat).
pub fn publish(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to).with_context(|| format!("creating {}", to.display()))?;
    let mut names: Vec<_> = std::fs::read_dir(from)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .map(|e| e.file_name())
        .collect();
    names.sort();
    for n in names {
        let bytes = std::fs::read(from.join(&n))?;
        write_atomic(&to.join(&n), &bytes)?;
    }
    Ok(())
}
