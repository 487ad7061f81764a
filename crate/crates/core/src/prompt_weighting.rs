//! Zero-shot teacher logits with per-sample prompt-confidence weighting.
//!
//! Each prompt template acts as its own linear classifier over the teacher's
//! image features. A sample's logits from prompt `i` are weighted by that
//! prompt's largest class score relative to the other prompts' largest scores.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_TAU: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptLogits {
    pub values: Vec<Matrix>,
    pub tau: f64,
}

impl PromptLogits {
    pub fn n_prompts(&self) -> usize {
        self.values.len()
    }

    pub fn batch(&self) -> usize {
        self.values.first().map_or(0, Matrix::rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLogits {
    pub logits: Matrix,
    pub per_sample_weights: Matrix,
}

fn check_inputs(features: &Matrix, text: &[Matrix], tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Validation(format!("tau must be > 0, got {tau}")));
    }
    let Some(first) = text.first() else {
        return Err(Error::shape("per_prompt_logits", "no prompt embeddings"));
    };
    for (i, t) in text.iter().enumerate() {
        if t.shape() != first.shape() {
            return Err(Error::shape(
                "per_prompt_logits",
                format!(
                    "prompt {i} is {:?}, prompt 0 is {:?}",
                    t.shape(),
                    first.shape()
                ),
            ));
        }
        if t.cols() != features.cols() {
            return Err(Error::shape(
                "per_prompt_logits",
                format!(
                    "prompt {i} has dim {}, features have dim {}",
                    t.cols(),
                    features.cols()
                ),
            ));
        }
    }
    Ok(())
}

/// `W_i = τ · I_f · T_iᵀ` for every prompt.
pub fn per_prompt_logits(features: &Matrix, text: &[Matrix], tau: f64) -> Result<PromptLogits> {
    check_inputs(features, text, tau)?;
    let values = text
        .iter()
        .map(|t| Ok(features.matmul_transposed(t)?.scale(tau)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptLogits { values, tau })
}

/// Per-sample weights `m_i / Σ_j m_j` with `m_i` the row max of `W_i`.
///
/// Rows where any `m_i ≤ 0` fall back to uniform `1/p`.
pub fn prompt_weights(pl: &PromptLogits) -> Matrix {
    let p = pl.n_prompts();
    let b = pl.batch();
    let mut weights = Matrix::filled(b, p, 1.0 / p as f64);
    let mut maxima = vec![0.0; p];
    for r in 0..b {
        for (m, w) in maxima.iter_mut().zip(&pl.values) {
            *m = w.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        if maxima.iter().all(|&m| m > 0.0) {
            let total: f64 = maxima.iter().sum();
            for (o, m) in weights.row_mut(r).iter_mut().zip(&maxima) {
                *o = m / total;
            }
        }
    }
    weights
}

/// Row `r` of the result is `Σ_i weights[r, i] · W_i[r]`.
pub fn weighted_logits(pl: &PromptLogits, weights: &Matrix) -> Result<WeightedLogits> {
    let (b, p) = (pl.batch(), pl.n_prompts());
    if weights.shape() != (b, p) {
        return Err(Error::shape(
            "weighted_logits",
            format!("weights {:?}, expected {b}x{p}", weights.shape()),
        ));
    }
    let c = pl.values.first().map_or(0, Matrix::cols);
    let mut out = Matrix::zeros(b, c);
    for (i, w_i) in pl.values.iter().enumerate() {
        for r in 0..b {
            let wr = weights.get(r, i);
            for (o, v) in out.row_mut(r).iter_mut().zip(w_i.row(r)) {
                *o += wr * v;
            }
        }
    }
    Ok(WeightedLogits {
        logits: out,
        per_sample_weights: weights.clone(),
    })
}

/// Convenience: per-prompt logits, weights and their combination.
pub fn teacher_logits(features: &Matrix, text: &[Matrix], tau: f64) -> Result<WeightedLogits> {
    let pl = per_prompt_logits(features, text, tau)?;
    let w = prompt_weights(&pl);
    weighted_logits(&pl, &w)
}

/// The averaged-prompt head: `τ · I_f · mean_i(T_i)ᵀ`, without re-normalizing the mean.
pub fn plain_zero_shot_logits(features: &Matrix, text: &[Matrix], tau: f64) -> Result<Matrix> {
    check_inputs(features, text, tau)?;
    let mut mean = Matrix::zeros(text[0].rows(), text[0].cols());
    for t in text {
        mean.add_assign(t)?;
    }
    let mean = mean.scale(1.0 / text.len() as f64);
    Ok(features.matmul_transposed(&mean)?.scale(tau))
}

pub fn soft_labels(logits: &Matrix) -> Matrix {
    logits.softmax_rows()
}

/// Row-wise argmax with ties going to the lowest class index.
pub fn teacher_predictions(logits: &Matrix) -> Vec<usize> {
    logits.argmax_rows()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn unit_self_product_gives_tau() {
        let t = m(&[&[1.0, 0.0, 0.0], &[0.0, 0.6, 0.8]]);
        let f = m(&[&[0.0, 0.6, 0.8]]);
        let pl = per_prompt_logits(&f, &[t], 100.0).unwrap();
        assert!((pl.values[0].get(0, 1) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_rows_give_zero() {
        let t = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let f = m(&[&[0.0, 1.0]]);
        let pl = per_prompt_logits(&f, &[t], 1.0).unwrap();
        assert_eq!(pl.values[0].get(0, 0), 0.0);
    }

    #[test]
    fn bad_inputs_rejected() {
        let f = Matrix::zeros(2, 3);
        assert!(per_prompt_logits(&f, &[Matrix::zeros(2, 4)], 1.0).is_err());
        assert!(per_prompt_logits(&f, &[], 1.0).is_err());
        assert!(per_prompt_logits(&f, &[Matrix::zeros(2, 3)], 0.0).is_err());
        assert!(per_prompt_logits(&f, &[Matrix::zeros(2, 3), Matrix::zeros(3, 3)], 1.0).is_err());
    }

    fn logits_with_maxima(maxima: &[f64]) -> PromptLogits {
        PromptLogits {
            values: maxima.iter().map(|&mx| m(&[&[mx, mx - 5.0]])).collect(),
            tau: 1.0,
        }
    }

    #[test]
    fn weight_examples() {
        let w = prompt_weights(&logits_with_maxima(&[7.0]));
        assert_eq!(w.data(), &[1.0]);
        let w = prompt_weights(&logits_with_maxima(&[2.0, 4.0]));
        assert!((w.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        let w = prompt_weights(&logits_with_maxima(&[-1.0, 3.0]));
        assert_eq!(w.data(), &[0.5, 0.5]);
    }

    #[test]
    fn weighted_hand_case() {
        let pl = PromptLogits {
            values: vec![m(&[&[2.0, 0.0]]), m(&[&[0.0, 4.0]])],
            tau: 1.0,
        };
        let w = m(&[&[1.0 / 3.0, 2.0 / 3.0]]);
        let out = weighted_logits(&pl, &w).unwrap();
        assert!((out.logits.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.logits.get(0, 1) - 8.0 / 3.0).abs() < 1e-15);
        assert!(weighted_logits(&pl, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn identical_prompts_ignore_weights() {
        let w1 = m(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, 1.0]]);
        let pl = PromptLogits {
            values: vec![w1.clone(), w1.clone()],
            tau: 1.0,
        };
        let weights = m(&[&[0.2, 0.8], &[0.9, 0.1]]);
        let out = weighted_logits(&pl, &weights).unwrap();
        assert!(out.logits.max_abs_diff(&w1).unwrap() < 1e-15);
    }

    #[test]
    fn plain_head_duplicate_prompt_invariance() {
        let t = m(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let f = m(&[&[0.8, 0.6], &[0.0, 1.0]]);
        let single = plain_zero_shot_logits(&f, std::slice::from_ref(&t), 50.0).unwrap();
        let double = plain_zero_shot_logits(&f, &[t.clone(), t.clone()], 50.0).unwrap();
        assert!(single.max_abs_diff(&double).unwrap() < 1e-12);
        let pp = per_prompt_logits(&f, &[t], 50.0).unwrap();
        assert!(single.max_abs_diff(&pp.values[0]).unwrap() < 1e-12);
    }

    #[test]
    fn prediction_examples() {
        assert_eq!(teacher_predictions(&m(&[&[0.1, 0.9, 0.3]])), vec![1]);
        assert_eq!(teacher_predictions(&m(&[&[0.5, 0.5]])), vec![0]);
    }
}
