//! Leave-one-domain-out evaluation, accuracy metrics, reports and feature
//! export.

mod audit;
mod lodo;
mod report;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{io, LayerGraph};
use crate::probing::OutputMatrix;
use crate::schema::AttributeAssignment;

pub use audit::{AuditEvent, AuditLog, Phase};
pub use lodo::{
    in_domain_gap, leave_one_domain_out, select_lambda, GapReport, LambdaSelection, LodoConfig, ModelPool, PooledModel,
    TrialSeeds,
};
pub use report::{render_summary, write_reports};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dream,
    Kennen,
    Random,
}

impl Method {
    /// Row label in reports.
    pub fn label(self) -> &'static str {
        match self {
            Method::Dream => "DREAM",
            Method::Kennen => "KENNEN*",
            Method::Random => "Random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dream" => Ok(Method::Dream),
            "kennen" | "kennen*" | "kennen-star" => Ok(Method::Kennen),
            "random" => Ok(Method::Random),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected dream, kennen or random"
            ))),
        }
    }
}

/// Per-attribute accuracy in percent and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub per_attribute: Vec<f64>,
    pub average: f64,
}

impl AccuracyRow {
    pub fn from_cells(per_attribute: Vec<f64>) -> Self {
        let average = per_attribute.iter().sum::<f64>() / per_attribute.len().max(1) as f64;
        Self { per_attribute, average }
    }

    /// Cell-wise mean of several rows.
    pub fn mean(rows: &[AccuracyRow]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Eval("no rows to average".into()))?;
        let k = first.per_attribute.len();
        if rows.iter().any(|r| r.per_attribute.len() != k) {
            return Err(Error::Eval("rows of different widths".into()));
        }
        let cells = (0..k)
            .map(|a| rows.iter().map(|r| r.per_attribute[a]).sum::<f64>() / rows.len() as f64)
            .collect();
        Ok(Self::from_cells(cells))
    }
}

pub fn attribute_accuracy(preds: &[AttributeAssignment], truths: &[AttributeAssignment]) -> Result<AccuracyRow> {
    if preds.is_empty() {
        return Err(Error::Eval("no predictions to score".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let k = truths[0].0.len();
    if preds.iter().chain(truths).any(|a| a.0.len() != k) {
        return Err(Error::Eval("assignments of different lengths".into()));
    }
    let cells = (0..k)
        .map(|a| {
            let hits = preds.iter().zip(truths).filter(|(p, t)| p.0[a] == t.0[a]).count();
            100.0 * hits as f64 / preds.len() as f64
        })
        .collect();
    Ok(AccuracyRow::from_cells(cells))
}

/// One method's scores on one held-out domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain: String,
    pub method: Method,
    pub attributes: Vec<String>,
    pub per_attribute: Vec<f64>,
    pub average: f64,
    pub trials: Vec<TrialResult>,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seeds: TrialSeeds,
    pub per_attribute: Vec<f64>,
    pub average: f64,
    /// λ chosen on source validation models (DREAM only).
    #[serde(default)]
    pub lambda: Option<f32>,
}

impl EvalReport {
    pub fn check(&self) -> Result<()> {
        if self.per_attribute.iter().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::Eval(format!(
                "{} on {}: accuracy outside [0, 100]",
                self.method, self.domain
            )));
        }
        let avg = AccuracyRow::from_cells(self.per_attribute.clone()).average;
        if avg != self.average {
            return Err(Error::Eval(format!(
                "{} on {}: average does not match its cells",
                self.method, self.domain
            )));
        }
        Ok(())
    }
}

/// Writes the generator features of every row as CSV with header
/// `domain,f0..f127`.
pub fn export_features(generator: &LayerGraph, outputs: &OutputMatrix, path: &Path) -> Result<()> {
    if generator.input_shape() != [outputs.width()] {
        return Err(Error::shape(
            "feature export input",
            generator.input_shape(),
            &[outputs.width()],
        ));
    }
    let dim = generator.output_shape().iter().product::<usize>();
    let rows: Vec<usize> = (0..outputs.len()).collect();
    let z = if rows.is_empty() {
        Vec::new()
    } else {
        generator.infer(&outputs.tensor(&rows))?.into_data()
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["domain".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    let csv_err = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for (r, meta) in outputs.meta.iter().enumerate() {
        let mut rec = vec![meta.domain.clone()];
        rec.extend(z[r * dim..(r + 1) * dim].iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    io::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests;
