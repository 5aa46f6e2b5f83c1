//! On-disk model zoo: `manifest.jsonl` plus one weight file per model.
//!
//! The first manifest line is a header; every following line is one model
//! record carrying a checksum of its own canonical JSON. The manifest is
//! rewritten atomically by a single writer after each finished model.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{model_id, train_white_box, ArchConfig, TrainBudget, TrainProvenance, TrainedModel, WhiteBoxSpec};
use crate::datasets::DomainDataset;
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::nn::io::write_atomic;
use crate::schema::{AttributeSchema, ModelsetSplit, SplitRole};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooHeader {
    pub format_version: u32,
    pub schema: AttributeSchema,
    pub schema_hash: String,
    pub domains: Vec<String>,
    /// `[channels, H, W]`
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub arch: ArchConfig,
    pub budget: TrainBudget,
    pub rng: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub spec: WhiteBoxSpec,
    pub role: SplitRole,
    pub status: ModelStatus,
    /// Relative to the zoo directory.
    #[serde(default)]
    pub weights: Option<String>,
    #[serde(default)]
    pub weights_sha256: Option<String>,
    #[serde(default)]
    pub val_accuracy: Option<f32>,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub provenance: Option<TrainProvenance>,
    #[serde(default)]
    pub error: Option<String>,
}

impl ModelRecord {
    fn checksum(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("record serializes"))
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    record: ModelRecord,
    checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZooManifest {
    pub header: ZooHeader,
    pub records: Vec<ModelRecord>,
}

impl ZooManifest {
    pub fn ok_records(&self) -> impl Iterator<Item = &ModelRecord> {
        self.records.iter().filter(|r| r.status == ModelStatus::Ok)
    }

    pub fn record(&self, id: &str) -> Option<&ModelRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        for r in &self.records {
            let line = RecordLine {
                checksum: r.checksum(),
                record: r.clone(),
            };
            out.extend(serde_json::to_vec(&line).expect("record serializes"));
            out.push(b'\n');
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &self.encode())
    }

    /// Reads and verifies a manifest; any corrupt or truncated line is an error.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(Error::Manifest(format!(
                "{}: partial write (no trailing newline)",
                path.display()
            )));
        }
        let mut lines = text.lines();
        let header: ZooHeader = serde_json::from_str(lines.next().unwrap_or_default())
            .map_err(|e| Error::Manifest(format!("{}: bad header: {e}", path.display())))?;
        if header.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {}",
                header.format_version
            )));
        }
        if header.schema.hash() != header.schema_hash {
            return Err(Error::Manifest("schema hash does not match the embedded schema".into()));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let parsed: RecordLine = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("{} line {}: {e}", path.display(), n + 2)))?;
            if parsed.record.checksum() != parsed.checksum {
                return Err(Error::Manifest(format!(
                    "{} line {}: checksum mismatch for {}",
                    path.display(),
                    n + 2,
                    parsed.record.id
                )));
            }
            records.push(parsed.record);
        }
        Ok(Self { header, records })
    }
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub workers: usize,
    /// Stop after this many newly finished models.
    pub limit: Option<usize>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub trained: usize,
    pub failed: usize,
    pub skipped: usize,
}

fn weight_rel_path(id: &str) -> String {
    format!("weights/{id}.drm")
}

/// Trains every model of `split` that the manifest in `dir` does not already
/// hold. Re-running after an interruption only trains the missing models.
pub fn build_zoo(
    dir: &Path,
    split: &ModelsetSplit,
    schema: &AttributeSchema,
    datasets: &[DomainDataset],
    arch: &ArchConfig,
    budget: &TrainBudget,
    opts: &BuildOptions,
) -> Result<BuildReport> {
    let by_name: HashMap<&str, &DomainDataset> = datasets.iter().map(|d| (d.name.as_str(), d)).collect();
    let mut domains: Vec<String> = Vec::new();
    for e in split.all() {
        if !by_name.contains_key(e.domain.as_str()) {
            return Err(Error::Dataset(format!("no dataset for domain {:?}", e.domain)));
        }
        if !domains.contains(&e.domain) {
            domains.push(e.domain.clone());
        }
        schema.check(&e.assignment)?;
    }
    let first = datasets
        .first()
        .ok_or_else(|| Error::Dataset("no datasets given".into()))?;
    DomainDataset::ensure_shared_label_space(&datasets.iter().collect::<Vec<_>>())?;
    let header = ZooHeader {
        format_version: MANIFEST_VERSION,
        schema: schema.clone(),
        schema_hash: schema.hash(),
        domains,
        input_shape: vec![first.channels, first.height, first.width],
        classes: first.class_count(),
        arch: arch.clone(),
        budget: budget.clone(),
        rng: "ChaCha8 per model, seeded by spec.seed".into(),
    };

    std::fs::create_dir_all(dir.join("weights")).map_err(|e| Error::io(dir, e))?;
    let mut manifest = if dir.join(MANIFEST_FILE).exists() {
        let existing = ZooManifest::load(dir)?;
        let same = ZooHeader {
            domains: header.domains.clone(),
            ..existing.header.clone()
        };
        if same != header {
            return Err(Error::Manifest(format!(
                "{} was built with a different schema, data shape or budget",
                dir.display()
            )));
        }
        let mut merged = existing.header.domains.clone();
        for d in &header.domains {
            if !merged.contains(d) {
                merged.push(d.clone());
            }
        }
        ZooManifest {
            header: ZooHeader {
                domains: merged,
                ..header.clone()
            },
            records: existing.records,
        }
    } else {
        ZooManifest {
            header: header.clone(),
            records: Vec::new(),
        }
    };

    let mut ids: Vec<(String, SplitRole, &WhiteBoxSpec)> = Vec::new();
    let mut seen = HashSet::new();
    for (role, e) in split.with_roles() {
        let id = model_id(e);
        if seen.insert(id.clone()) {
            ids.push((id, role, e));
        } else {
            return Err(Error::Manifest(format!("{id} appears twice in the modelset")));
        }
    }
    let done: HashSet<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    let mut pending: Vec<&(String, SplitRole, &WhiteBoxSpec)> =
        ids.iter().filter(|(id, _, _)| !done.contains(id)).collect();
    let mut report = BuildReport {
        skipped: ids.len() - pending.len(),
        ..Default::default()
    };
    if let Some(limit) = opts.limit {
        pending.truncate(limit);
    }
    manifest.save(dir)?;
    if pending.is_empty() {
        return Ok(report);
    }

    let order: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, (id, _, _))| (id.as_str(), i)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let (tx, rx) = mpsc::channel::<(String, SplitRole, WhiteBoxSpec, Result<TrainedModel>)>();

    std::thread::scope(|scope| -> Result<()> {
        scope.spawn(move || {
            pool.install(|| {
                pending.par_iter().for_each_with(tx, |tx, (id, role, spec)| {
                    let data = by_name[spec.domain.as_str()];
                    let result = train_white_box(spec, schema, data, arch, budget);
                    let _ = tx.send((id.clone(), *role, (*spec).clone(), result));
                });
            });
        });
        // single writer
        for (id, role, spec, result) in rx {
            let record = match result {
                Ok(model) => {
                    let rel = weight_rel_path(&id);
                    let path = dir.join(&rel);
                    model.graph.save_weights(&path)?;
                    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    report.trained += 1;
                    tracing::info!(model = %id, val_acc = model.best_val_accuracy, "trained");
                    ModelRecord {
                        id: id.clone(),
                        spec,
                        role,
                        status: ModelStatus::Ok,
                        weights: Some(rel),
                        weights_sha256: Some(sha256_hex(&bytes)),
                        val_accuracy: Some(model.best_val_accuracy),
                        best_epoch: Some(model.best_epoch),
                        provenance: Some(model.provenance),
                        error: None,
                    }
                }
                Err(e) => {
                    report.failed += 1;
                    tracing::warn!(model = %id, "training failed: {e}");
                    ModelRecord {
                        id: id.clone(),
                        spec,
                        role,
                        status: ModelStatus::Failed,
                        weights: None,
                        weights_sha256: None,
                        val_accuracy: None,
                        best_epoch: None,
                        provenance: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            manifest.records.push(record);
            manifest
                .records
                .sort_by_key(|r| order.get(r.id.as_str()).copied().unwrap_or(usize::MAX));
            manifest.save(dir)?;
        }
        Ok(())
    })?;
    Ok(report)
}

fn load_one(dir: &Path, header: &ZooHeader, record: &ModelRecord) -> Result<TrainedModel> {
    let rel = record
        .weights
        .as_ref()
        .ok_or_else(|| Error::Manifest(format!("{}: no weight file", record.id)))?;
    let path: PathBuf = dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if record.weights_sha256.as_deref() != Some(sha256_hex(&bytes).as_str()) {
        return Err(Error::Manifest(format!(
            "{}: weight file checksum mismatch",
            path.display()
        )));
    }
    let mut graph = super::build_cnn(
        &header.schema,
        &record.spec.assignment,
        &header.input_shape,
        header.classes,
        &header.arch,
        record.spec.seed,
    )?;
    graph.load_state(&crate::nn::io::decode_records(&bytes, &path)?)?;
    Ok(TrainedModel {
        spec: record.spec.clone(),
        graph,
        best_val_accuracy: record.val_accuracy.unwrap_or(0.0),
        best_epoch: record.best_epoch.unwrap_or(0),
        epochs_trained: header.budget.epochs,
        provenance: record
            .provenance
            .clone()
            .ok_or_else(|| Error::Manifest(format!("{}: no provenance", record.id)))?,
    })
}

/// Loads one successfully trained model by id.
pub fn load_model(dir: &Path, id: &str) -> Result<TrainedModel> {
    let manifest = ZooManifest::load(dir)?;
    let record = manifest
        .ok_records()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::Manifest(format!("{}: no trained model {id:?}", dir.display())))?;
    load_one(dir, &manifest.header, record)
}

/// Loads the manifest and every successfully trained model, in manifest order.
pub fn load_zoo(dir: &Path) -> Result<(ZooManifest, Vec<TrainedModel>)> {
    let manifest = ZooManifest::load(dir)?;
    let models = manifest
        .ok_records()
        .map(|r| load_one(dir, &manifest.header, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_synthetic_domains, SyntheticSpec};
    use crate::nn::Tensor;
    use crate::schema::{enumerate_grid, sample_modelset, SplitCounts};

    fn setup() -> (AttributeSchema, Vec<DomainDataset>, ArchConfig, TrainBudget) {
        let schema = AttributeSchema::from_json(include_str!("../../../../assets/schemas/desk24.json")).unwrap();
        let data = make_synthetic_domains(&SyntheticSpec {
            n_domains: 2,
            classes: 3,
            n_per_class: 12,
            image_size: 8,
            style_shift: 1.0,
            seed: 1,
        })
        .unwrap();
        let arch = ArchConfig {
            first_channels: 2,
            max_channels: 4,
            fc_hidden: 8,
            dropout: 0.1,
        };
        let budget = TrainBudget {
            epochs: 1,
            ..Default::default()
        };
        (schema, data, arch, budget)
    }

    fn split(schema: &AttributeSchema, counts: SplitCounts) -> ModelsetSplit {
        let grid = enumerate_grid(schema).unwrap();
        ModelsetSplit::merge(
            ["domain0", "domain1"]
                .iter()
                .enumerate()
                .map(|(i, d)| sample_modelset(&grid, 3, counts, i as u64, d, false).unwrap()),
        )
    }

    #[test]
    fn interrupted_build_resumes_with_only_missing_models() {
        let (schema, data, arch, budget) = setup();
        let split = split(
            &schema,
            SplitCounts {
                train: 8,
                val: 2,
                test: 2,
            },
        );
        assert_eq!(split.len(), 24);
        let dir = tempfile::tempdir().unwrap();
        let first = build_zoo(
            dir.path(),
            &split,
            &schema,
            &data,
            &arch,
            &budget,
            &BuildOptions {
                workers: 1,
                limit: Some(10),
            },
        )
        .unwrap();
        assert_eq!(first.trained + first.failed, 10);
        let second = build_zoo(
            dir.path(),
            &split,
            &schema,
            &data,
            &arch,
            &budget,
            &BuildOptions::default(),
        )
        .unwrap();
        assert_eq!(second.trained + second.failed, 14);
        assert_eq!(second.skipped, 10);
        let manifest = ZooManifest::load(dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 24);
        let ids: Vec<String> = split.all().map(model_id).collect();
        let got: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
        assert_eq!(got, ids);
    }

    #[test]
    fn loaded_models_reproduce_outputs_bitwise() {
        let (schema, data, arch, budget) = setup();
        let split = split(
            &schema,
            SplitCounts {
                train: 1,
                val: 0,
                test: 1,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        build_zoo(
            dir.path(),
            &split,
            &schema,
            &data,
            &arch,
            &budget,
            &BuildOptions::default(),
        )
        .unwrap();
        let (_, models) = load_zoo(dir.path()).unwrap();
        assert_eq!(models.len(), 4);
        let probe = data[0].batch_nchw(&[0, 1, 2]);
        for m in &models {
            let d = data.iter().find(|d| d.name == m.spec.domain).unwrap();
            let fresh = train_white_box(&m.spec, &schema, d, &arch, &budget).unwrap();
            assert_eq!(fresh.graph.infer(&probe).unwrap(), m.graph.infer(&probe).unwrap());
        }
    }

    #[test]
    fn corrupted_record_is_detected() {
        let (schema, data, arch, budget) = setup();
        let split = split(
            &schema,
            SplitCounts {
                train: 1,
                val: 0,
                test: 0,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        build_zoo(
            dir.path(),
            &split,
            &schema,
            &data,
            &arch,
            &budget,
            &BuildOptions::default(),
        )
        .unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"ok\"", "\"failed\"", 1)).unwrap();
        assert!(ZooManifest::load(dir.path())
            .unwrap_err()
            .to_string()
            .contains("checksum"));
        std::fs::write(&path, &text[..text.len() - 5]).unwrap();
        assert!(ZooManifest::load(dir.path()).is_err());
    }

    #[test]
    fn training_is_order_independent() {
        let (schema, data, arch, budget) = setup();
        let split = split(
            &schema,
            SplitCounts {
                train: 3,
                val: 0,
                test: 0,
            },
        );
        let mut reversed = split.clone();
        reversed.train.reverse();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_zoo(
            a.path(),
            &split,
            &schema,
            &data,
            &arch,
            &budget,
            &BuildOptions {
                workers: 2,
                limit: None,
            },
        )
        .unwrap();
        build_zoo(
            b.path(),
            &reversed,
            &schema,
            &data,
            &arch,
            &budget,
            &BuildOptions::default(),
        )
        .unwrap();
        let (_, ma) = load_zoo(a.path()).unwrap();
        let (_, mb) = load_zoo(b.path()).unwrap();
        let probe: Tensor = data[1].batch_nchw(&[3, 4]);
        for m in &ma {
            let other = mb.iter().find(|o| o.id() == m.id()).unwrap();
            assert_eq!(m.graph.infer(&probe).unwrap(), other.graph.infer(&probe).unwrap());
        }
    }

    #[test]
    fn missing_domain_dataset_is_an_error() {
        let (schema, data, arch, budget) = setup();
        let split = split(
            &schema,
            SplitCounts {
                train: 1,
                val: 0,
                test: 0,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let err = build_zoo(
            dir.path(),
            &split,
            &schema,
            &data[..1],
            &arch,
            &budget,
            &BuildOptions::default(),
        );
        assert!(err.is_err());
    }
}
