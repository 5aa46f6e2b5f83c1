//! Scalar objectives of the adversarial game, with gradients with respect to
//! the discriminator outputs.

use crate::error::{Error, Result};
use crate::nn::{loss, Tensor};

fn column(values: &[f32]) -> Tensor {
    Tensor::new(vec![values.len(), 1], values.to_vec()).expect("column shape")
}

/// `mean ln D(real) + Σ_i mean ln(1 − D(fake_i))`, the value the
/// discriminator maximizes. Returns the value and `∂V/∂D` for the real rows
/// followed by every fake block.
pub fn discriminator_objective(real: &[f32], fakes: &[&[f32]]) -> Result<(f64, Vec<f32>)> {
    if real.is_empty() || fakes.is_empty() || fakes.iter().any(|f| f.is_empty()) {
        return Err(Error::Eval("discriminator objective on an empty batch".into()));
    }
    let mut probs = real.to_vec();
    let mut a = vec![1.0 / real.len() as f32; real.len()];
    let mut b = vec![0.0; real.len()];
    for f in fakes {
        probs.extend_from_slice(f);
        a.extend(std::iter::repeat(0.0).take(f.len()));
        b.extend(std::iter::repeat(1.0 / f.len() as f32).take(f.len()));
    }
    let (v, g) = loss::log_likelihood_terms(&column(&probs), &a, &b)?;
    Ok((v, g.into_data()))
}

/// Adversarial term the generator minimizes for one discriminator and its
/// fake blocks: `Σ_i mean ln(1 − D(fake_i))`, or `−Σ_i mean ln D(fake_i)`
/// when `non_saturating`. Returns the value and `∂/∂D` per fake row.
pub fn generator_adversarial(fakes: &[&[f32]], non_saturating: bool) -> Result<(f64, Vec<f32>)> {
    if fakes.is_empty() || fakes.iter().any(|f| f.is_empty()) {
        return Err(Error::Eval("generator objective on an empty batch".into()));
    }
    let mut probs = Vec::new();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for f in fakes {
        let w = 1.0 / f.len() as f32;
        probs.extend_from_slice(f);
        if non_saturating {
            a.extend(std::iter::repeat(-w).take(f.len()));
            b.extend(std::iter::repeat(0.0).take(f.len()));
        } else {
            a.extend(std::iter::repeat(0.0).take(f.len()));
            b.extend(std::iter::repeat(w).take(f.len()));
        }
    }
    let (v, g) = loss::log_likelihood_terms(&column(&probs), &a, &b)?;
    Ok((v, g.into_data()))
}

/// Full generator/meta objective: the adversarial terms of every
/// (discriminator, fake-domain) pair plus `λ · Σ_k mean CE_k`.
pub fn generator_meta_objective(
    pair_fakes: &[&[f32]],
    head_probs: &[Tensor],
    labels: &[Vec<usize>],
    lambda: f32,
) -> Result<f64> {
    let (adv, _) = generator_adversarial(pair_fakes, false)?;
    if head_probs.len() != labels.len() {
        return Err(Error::shape(
            "meta objective heads",
            &[head_probs.len()],
            &[labels.len()],
        ));
    }
    let mut ce = 0.0f64;
    for (p, y) in head_probs.iter().zip(labels) {
        if p.batch() != y.len() || p.batch() == 0 {
            return Err(Error::shape("meta objective labels", &[p.batch()], &[y.len()]));
        }
        let n = p.shape()[1];
        let mut sum = 0.0f64;
        for (r, &t) in y.iter().enumerate() {
            if t >= n {
                return Err(Error::Assignment(format!("label {t} for a head of width {n}")));
            }
            sum -= loss::clamped_ln(p.row(r)[t]) as f64;
        }
        ce += sum / y.len() as f64;
    }
    Ok(adv + lambda as f64 * ce)
}

/// Balanced accuracy of a discriminator: the mean of its accuracy on real
/// rows (`D > 0.5`) and on fake rows (`D < 0.5`). An output of exactly 0.5
/// counts as half correct.
pub fn balanced_accuracy(real: &[f32], fake: &[f32]) -> f32 {
    let score = |v: &[f32], real: bool| {
        let hits: f32 = v
            .iter()
            .map(|&d| match d.partial_cmp(&0.5) {
                Some(std::cmp::Ordering::Greater) => real as u8 as f32,
                Some(std::cmp::Ordering::Less) => !real as u8 as f32,
                _ => 0.5,
            })
            .sum();
        hits / v.len().max(1) as f32
    };
    (score(real, true) + score(fake, false)) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn perfect_discriminator_reaches_the_supremum() {
        let (v, _) = discriminator_objective(&[1.0; 4], &[&[0.0; 4], &[0.0; 4]]).unwrap();
        assert!(v.abs() < 1e-5 && v <= 0.0, "{v}");
    }

    #[test]
    fn half_everywhere_gives_m_log_half() {
        for m in 2..5 {
            let fakes: Vec<Vec<f32>> = (1..m).map(|_| vec![0.5; 10]).collect();
            let refs: Vec<&[f32]> = fakes.iter().map(Vec::as_slice).collect();
            let (v, _) = discriminator_objective(&[0.5; 10], &refs).unwrap();
            assert!((v + m as f64 * LN_2).abs() < 1e-6, "{m}: {v}");
        }
    }

    #[test]
    fn gradients_cancel_at_the_fixed_point() {
        // identical real and fake batches at D = 0.5: ∂/∂D of ln D is +2/b
        // per real row, of ln(1 − D) is −2/b per fake row
        let (_, g) = discriminator_objective(&[0.5; 8], &[&[0.5; 8]]).unwrap();
        let real: f32 = g[..8].iter().sum();
        let fake: f32 = g[8..].iter().sum();
        assert!((real + fake).abs() < 1e-6);
        assert!((real - 2.0).abs() < 1e-6);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(discriminator_objective(&[], &[&[0.5]]).is_err());
        assert!(discriminator_objective(&[0.5], &[]).is_err());
    }

    fn uniform_heads(cards: &[usize], rows: usize) -> (Vec<Tensor>, Vec<Vec<usize>>) {
        let probs = cards
            .iter()
            .map(|&n| Tensor::full(&[rows, n], 1.0 / n as f32))
            .collect();
        let labels = cards.iter().map(|_| vec![0; rows]).collect();
        (probs, labels)
    }

    #[test]
    fn single_pair_uniform_heads_closed_form() {
        let cards = [4, 2, 2, 2, 3, 3, 3, 3, 2];
        let (p, y) = uniform_heads(&cards, 6);
        for lambda in [0.001f32, 0.1, 1.0, 10.0] {
            let got = generator_meta_objective(&[&[0.5; 6]], &p, &y, lambda).unwrap();
            let oracle = -LN_2 + lambda as f64 * (4f64.ln() + 4.0 * 3f64.ln() + 4.0 * LN_2);
            assert!(
                (got - oracle).abs() < 1e-4 * oracle.abs().max(1.0),
                "{lambda}: {got} vs {oracle}"
            );
        }
    }

    #[test]
    fn zero_lambda_and_perfect_heads_leave_only_the_adversarial_term() {
        let fakes: [&[f32]; 2] = [&[0.3, 0.6], &[0.2, 0.9]];
        let (adv, _) = generator_adversarial(&fakes, false).unwrap();
        let (p, y) = uniform_heads(&[3, 2], 2);
        assert_eq!(generator_meta_objective(&fakes, &p, &y, 0.0).unwrap(), adv);
        let perfect = vec![Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap()];
        let got = generator_meta_objective(&fakes, &perfect, &[vec![0, 0]], 5.0).unwrap();
        assert!((got - adv).abs() < 1e-12);
    }

    #[test]
    fn non_saturating_pushes_d_up() {
        let (_, g) = generator_adversarial(&[&[0.2, 0.4]], true).unwrap();
        // minimizing −ln D: gradient negative, so descent increases D
        assert!(g.iter().all(|&v| v < 0.0));
        let (_, g) = generator_adversarial(&[&[0.2, 0.4]], false).unwrap();
        // minimizing ln(1 − D): gradient negative as well
        assert!(g.iter().all(|&v| v < 0.0));
    }

    #[test]
    fn balanced_accuracy_counts_both_sides() {
        assert_eq!(balanced_accuracy(&[0.9, 0.9], &[0.1, 0.9]), 0.75);
        assert_eq!(balanced_accuracy(&[0.5], &[0.5]), 0.5);
    }
}
