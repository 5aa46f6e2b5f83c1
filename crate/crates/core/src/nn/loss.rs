//! Loss functions. Each returns the scalar value together with the gradient
//! with respect to its input, ready to feed into `LayerGraph::backward`.

use super::layers::softmax_row;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to every probability before taking its log.
pub const LOG_FLOOR: f32 = 1e-7;

pub fn clamped_ln(p: f32) -> f32 {
    p.max(LOG_FLOOR).ln()
}

/// Row-wise softmax of a `[batch, classes]` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::shape(
            "softmax",
            &[logits.batch(), logits.item_len()],
            logits.shape(),
        ));
    }
    let c = logits.shape()[1];
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits.data().chunks(c).zip(out.chunks_mut(c)) {
        softmax_row(row, o);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over the batch of `-yᵀ log softmax(logits)`, computed with a max
/// shift. `targets` holds one (one-hot or soft) distribution per row.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f32, Tensor)> {
    if logits.shape() != targets.shape() || logits.shape().len() != 2 {
        return Err(Error::shape("cross_entropy", logits.shape(), targets.shape()));
    }
    let batch = logits.batch();
    if batch == 0 {
        return Err(Error::shape("cross_entropy", &[1, logits.item_len()], logits.shape()));
    }
    let c = logits.shape()[1];
    let mut loss = 0.0f64;
    let mut grad = vec![0.0; logits.len()];
    for ((row, y), g) in logits
        .data()
        .chunks(c)
        .zip(targets.data().chunks(c))
        .zip(grad.chunks_mut(c))
    {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
        let mass: f32 = y.iter().sum();
        for ((&z, &t), gv) in row.iter().zip(y).zip(g.iter_mut()) {
            let logp = z as f64 - lse;
            loss -= t as f64 * logp.max(LOG_FLOOR.ln() as f64);
            *gv = ((logp.exp() as f32) * mass - t) / batch as f32;
        }
    }
    let value = (loss / batch as f64) as f32;
    if !value.is_finite() {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    Ok((value, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Weighted sum of log-probability terms over a column of probabilities:
/// `Σ_r a_r·ln d_r + b_r·ln(1 − d_r)`, with `d` clamped to
/// `[LOG_FLOOR, 1 − LOG_FLOOR]`. Returns the value and `∂/∂d`.
pub fn log_likelihood_terms(probs: &Tensor, log_d: &[f32], log_one_minus_d: &[f32]) -> Result<(f64, Tensor)> {
    let n = probs.len();
    if log_d.len() != n || log_one_minus_d.len() != n || probs.item_len() != 1 {
        return Err(Error::shape(
            "log_likelihood_terms",
            &[n, 1],
            &[log_d.len(), log_one_minus_d.len()],
        ));
    }
    let mut value = 0.0f64;
    let mut grad = vec![0.0; n];
    for (((&d, &a), &b), g) in probs.data().iter().zip(log_d).zip(log_one_minus_d).zip(grad.iter_mut()) {
        let p = d.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
        let q = 1.0 - p;
        value += a as f64 * (p as f64).ln() + b as f64 * (q as f64).ln();
        let inside = d > LOG_FLOOR && d < 1.0 - LOG_FLOOR;
        if inside {
            *g = a / p - b / q;
        }
    }
    Ok((value, Tensor::new(probs.shape().to_vec(), grad)?))
}

/// One-hot matrix for class indices.
pub fn one_hot(indices: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * classes];
    for (row, &i) in indices.iter().enumerate() {
        data[row * classes + i] = 1.0;
    }
    Tensor::new(vec![indices.len(), classes], data).expect("consistent one-hot shape")
}
