use std::borrow::Borrow;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::QuerySet;
use crate::error::{Error, Result};
use crate::modelzoo::TrainedModel;
use crate::nn::{io, Tensor};
use crate::schema::AttributeAssignment;

/// Tolerance on the sum of each C-block.
pub const BLOCK_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRowMeta {
    pub model_id: String,
    pub domain: String,
    pub assignment: AttributeAssignment,
}

/// Concatenated probability outputs of many models on one query set.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMatrix {
    pub n_queries: usize,
    pub classes: usize,
    pub query_hash: String,
    pub meta: Vec<OutputRowMeta>,
    /// Row-major `rows × (N·C)`.
    pub values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct OutputSidecar {
    n_queries: usize,
    classes: usize,
    query_hash: String,
    rows: Vec<OutputRowMeta>,
}

/// Checks that `vector` is `n` finite, non-negative blocks of width `c`
/// that each sum to one.
pub fn check_probability_blocks(vector: &[f32], n: usize, c: usize) -> Result<()> {
    if vector.len() != n * c {
        return Err(Error::NonProbability(format!(
            "expected {} values, got {}",
            n * c,
            vector.len()
        )));
    }
    for (j, block) in vector.chunks(c).enumerate() {
        if block.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonProbability(format!(
                "block {j} has negative or non-finite entries"
            )));
        }
        let sum: f64 = block.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > BLOCK_SUM_TOLERANCE {
            return Err(Error::NonProbability(format!("block {j} sums to {sum}")));
        }
    }
    Ok(())
}

impl OutputMatrix {
    pub fn new(n_queries: usize, classes: usize, query_hash: impl Into<String>) -> Self {
        Self {
            n_queries,
            classes,
            query_hash: query_hash.into(),
            meta: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.n_queries * self.classes
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn push(&mut self, meta: OutputRowMeta, vector: Vec<f32>) -> Result<()> {
        check_probability_blocks(&vector, self.n_queries, self.classes)?;
        self.meta.push(meta);
        self.values.extend(vector);
        Ok(())
    }

    /// Distinct domains in first-appearance order.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for m in &self.meta {
            if !out.contains(&m.domain) {
                out.push(m.domain.clone());
            }
        }
        out
    }

    pub fn rows_of(&self, domain: &str) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.meta[i].domain == domain).collect()
    }

    /// Rows `indices` as an `[len, N·C]` tensor.
    pub fn tensor(&self, indices: &[usize]) -> Tensor {
        let w = self.width();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), w], data).expect("row width is fixed")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.n_queries, self.classes, self.query_hash.clone());
        for &i in indices {
            out.meta.push(self.meta[i].clone());
            out.values.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.len() * self.width() {
            return Err(Error::NonProbability("value count does not match rows × N·C".into()));
        }
        for i in 0..self.len() {
            check_probability_blocks(self.row(i), self.n_queries, self.classes)
                .map_err(|e| Error::NonProbability(format!("row {} ({}): {e}", i, self.meta[i].model_id)))?;
        }
        Ok(())
    }

    /// Writes `<stem>.drm` (values) and `<stem>.json` (labels and domains).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let t = Tensor::new(vec![self.len(), self.width()], self.values.clone())?;
        io::save_records(&stem.with_extension("drm"), &[("outputs".to_string(), t)])?;
        let side = OutputSidecar {
            n_queries: self.n_queries,
            classes: self.classes,
            query_hash: self.query_hash.clone(),
            rows: self.meta.clone(),
        };
        io::write_atomic(&stem.with_extension("json"), &serde_json::to_vec_pretty(&side)?)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let json_path = stem.with_extension("json");
        let text = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let side: OutputSidecar = serde_json::from_slice(&text)?;
        let records = io::load_records(&stem.with_extension("drm"))?;
        let (_, t) = records
            .into_iter()
            .find(|(k, _)| k == "outputs")
            .ok_or_else(|| Error::Format {
                path: stem.with_extension("drm"),
                reason: "no \"outputs\" record".into(),
            })?;
        if t.shape() != [side.rows.len(), side.n_queries * side.classes] {
            return Err(Error::shape(
                "output matrix",
                &[side.rows.len(), side.n_queries * side.classes],
                t.shape(),
            ));
        }
        let m = Self {
            n_queries: side.n_queries,
            classes: side.classes,
            query_hash: side.query_hash,
            meta: side.rows,
            values: t.into_data(),
        };
        m.validate()?;
        Ok(m)
    }
}

/// Concatenated eval-mode probabilities of one model on all queries.
pub fn model_vector(model: &TrainedModel, q: &QuerySet) -> Result<Vec<f32>> {
    let probs = model.predict_proba(&q.batch_nchw())?;
    probs.ensure_finite(&format!("model {}", model.id()))?;
    Ok(probs.into_data())
}

/// Runs every model on the query set; rows follow the model order.
pub fn harvest<M: Borrow<TrainedModel> + Sync>(models: &[M], q: &QuerySet) -> Result<OutputMatrix> {
    let models: Vec<&TrainedModel> = models.iter().map(Borrow::borrow).collect();
    let Some(first) = models.first() else {
        return Err(Error::QuerySet("no models to harvest".into()));
    };
    let classes = first.graph.output_shape().iter().product::<usize>();
    if let Some(bad) = models
        .iter()
        .find(|m| m.graph.output_shape() != first.graph.output_shape())
    {
        return Err(Error::shape(
            format!("class count of {}", bad.id()),
            first.graph.output_shape(),
            bad.graph.output_shape(),
        ));
    }
    let vectors: Vec<Vec<f32>> = models.par_iter().map(|m| model_vector(m, q)).collect::<Result<_>>()?;
    let mut out = OutputMatrix::new(q.len(), classes, q.hash.clone());
    for (m, v) in models.iter().zip(vectors) {
        out.push(
            OutputRowMeta {
                model_id: m.id(),
                domain: m.spec.domain.clone(),
                assignment: m.spec.assignment.clone(),
            },
            v,
        )?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(id: &str) -> OutputRowMeta {
        OutputRowMeta {
            model_id: id.into(),
            domain: "d".into(),
            assignment: AttributeAssignment(vec![0]),
        }
    }

    #[test]
    fn rejects_logits_and_wrong_width() {
        let mut m = OutputMatrix::new(2, 2, "h");
        assert!(m.push(meta("a"), vec![0.5, 0.5, 0.2, 0.8]).is_ok());
        let err = m.push(meta("b"), vec![2.0, -1.0, 0.5, 0.5]).unwrap_err();
        assert!(err.to_string().contains("non-probability output"));
        assert!(m.push(meta("c"), vec![0.5, 0.5]).is_err());
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = OutputMatrix::new(1, 3, "abc");
        m.push(meta("x"), vec![0.2, 0.3, 0.5]).unwrap();
        m.push(meta("y"), vec![1.0, 0.0, 0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(&dir.path().join("o")).unwrap();
        assert_eq!(OutputMatrix::load(&dir.path().join("o")).unwrap(), m);
    }

    proptest! {
        #[test]
        fn softmax_blocks_always_pass_the_check(logits in proptest::collection::vec(-30.0f32..30.0, 7 * 5)) {
            let t = Tensor::new(vec![5, 7], logits).unwrap();
            let p = crate::nn::loss::softmax(&t).unwrap();
            prop_assert!(check_probability_blocks(p.data(), 5, 7).is_ok());
        }
    }
}
