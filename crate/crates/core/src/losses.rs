//! Training objectives.
//!
//! Each loss exists as a tape operation (`*_on_tape`) used by the trainer and
//! as a plain value function that evaluates the same tape code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

pub const DEFAULT_LAMBDA_NODE: f64 = 0.4;
pub const DEFAULT_LAMBDA_EDGE: f64 = 0.2;
pub const DEFAULT_KD_TEMPERATURE: f64 = 4.0;

/// How a residual matrix is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// `sqrt(Σ x²)`
    #[default]
    Frobenius,
    /// `mean(x²)`
    MeanSquare,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_node: f64,
    pub lambda_edge: f64,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_node: DEFAULT_LAMBDA_NODE,
            lambda_edge: DEFAULT_LAMBDA_EDGE,
            reduction: Reduction::Frobenius,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_node", self.lambda_node),
            ("lambda_edge", self.lambda_edge),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn reduce(tape: &mut Tape, residual: Var, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Frobenius => tape.frobenius(residual),
        Reduction::MeanSquare => {
            let sq = tape.mul(residual, residual).expect("same shape");
            tape.mean(sq)
        }
    }
}

fn check_probability_rows(t: &Matrix) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Validation(format!(
                "teacher soft labels: row {r} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// `-(1/b) Σ_r Σ_j t[r,j] · log_softmax(student)[r,j]`.
pub fn soft_cross_entropy_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    teacher_probs: &Matrix,
) -> Result<Var> {
    let s = tape.value(student_logits);
    if s.shape() != teacher_probs.shape() {
        return Err(Error::shape(
            "soft_cross_entropy",
            format!(
                "student {:?} vs teacher {:?}",
                s.shape(),
                teacher_probs.shape()
            ),
        ));
    }
    check_probability_rows(teacher_probs)?;
    let b = s.rows().max(1) as f64;
    let t = tape.constant(teacher_probs.clone());
    let ls = tape.log_softmax_rows(student_logits);
    let prod = tape.mul(t, ls)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / b))
}

/// Distance of a square correlation matrix from the identity.
pub fn node_alignment_loss_on_tape(
    tape: &mut Tape,
    corr: Var,
    reduction: Reduction,
) -> Result<Var> {
    let (r, c) = tape.value(corr).shape();
    if r != c {
        return Err(Error::shape(
            "node_alignment_loss",
            format!("{r}x{c} is not square"),
        ));
    }
    let eye = tape.constant(Matrix::identity(r));
    let residual = tape.sub(corr, eye)?;
    Ok(reduce(tape, residual, reduction))
}

/// Distance between teacher and student edge matrices; the teacher side is detached.
pub fn edge_alignment_loss_on_tape(
    tape: &mut Tape,
    teacher_edges: Var,
    student_edges: Var,
    reduction: Reduction,
) -> Result<Var> {
    let (t, s) = (tape.value(teacher_edges), tape.value(student_edges));
    if t.shape() != s.shape() {
        return Err(Error::shape(
            "edge_alignment_loss",
            format!("teacher {:?} vs student {:?}", t.shape(), s.shape()),
        ));
    }
    let t = tape.detach(teacher_edges);
    let residual = tape.sub(t, student_edges)?;
    Ok(reduce(tape, residual, reduction))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "temperature must be > 0, got {temperature}"
        )))
    }
}

/// `(T²/b) Σ_r KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn kd_baseline_loss_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Matrix,
    temperature: f64,
) -> Result<Var> {
    check_temperature(temperature)?;
    let s = tape.value(student_logits);
    if s.shape() != teacher_logits.shape() {
        return Err(Error::shape(
            "kd_baseline_loss",
            format!(
                "student {:?} vs teacher {:?}",
                s.shape(),
                teacher_logits.shape()
            ),
        ));
    }
    let b = s.rows().max(1) as f64;
    let scaled_teacher = teacher_logits.scale(1.0 / temperature);
    let p_t = tape.constant(scaled_teacher.softmax_rows());
    let log_p_t = tape.constant(scaled_teacher.log_softmax_rows());
    let scaled_student = tape.scale(student_logits, 1.0 / temperature);
    let log_p_s = tape.log_softmax_rows(scaled_student);
    let log_ratio = tape.sub(log_p_t, log_p_s)?;
    let weighted = tape.mul(p_t, log_ratio)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, temperature * temperature / b))
}

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).item())
}

pub fn soft_cross_entropy(student_logits: &Matrix, teacher_probs: &Matrix) -> Result<f64> {
    eval_scalar(|t| {
        let s = t.constant(student_logits.clone());
        soft_cross_entropy_on_tape(t, s, teacher_probs)
    })
}

pub fn node_alignment_loss(corr: &Matrix, reduction: Reduction) -> Result<f64> {
    eval_scalar(|t| {
        let c = t.constant(corr.clone());
        node_alignment_loss_on_tape(t, c, reduction)
    })
}

pub fn edge_alignment_loss(
    teacher_edges: &Matrix,
    student_edges: &Matrix,
    reduction: Reduction,
) -> Result<f64> {
    eval_scalar(|t| {
        let a = t.constant(teacher_edges.clone());
        let b = t.constant(student_edges.clone());
        edge_alignment_loss_on_tape(t, a, b, reduction)
    })
}

pub fn kd_baseline_loss(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    temperature: f64,
) -> Result<f64> {
    eval_scalar(|t| {
        let s = t.constant(student_logits.clone());
        kd_baseline_loss_on_tape(t, s, teacher_logits, temperature)
    })
}

pub fn prg_loss(node_loss: f64, edge_loss: f64, w: &LossWeights) -> f64 {
    w.lambda_node * node_loss + w.lambda_edge * edge_loss
}

pub fn total_loss(ce: f64, prg: f64) -> f64 {
    ce + prg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn ce_one_hot_uniform_student() {
        let t = m(&[&[0.0, 1.0, 0.0, 0.0]]);
        let s = Matrix::zeros(1, 4);
        assert!((soft_cross_entropy(&s, &t).unwrap() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn ce_at_match_is_entropy() {
        let s = m(&[&[0.2, -1.0, 1.5], &[3.0, 0.0, 0.1]]);
        let t = s.softmax_rows();
        let entropy: f64 = -t.data().iter().map(|p| p * p.ln()).sum::<f64>() / 2.0;
        assert!((soft_cross_entropy(&s, &t).unwrap() - entropy).abs() < 1e-12);
    }

    #[test]
    fn ce_hand_instance() {
        let s = m(&[&[1.0, 2.0], &[0.5, -0.5]]);
        let t = m(&[&[0.25, 0.75], &[0.9, 0.1]]);
        let ls = |a: f64, b: f64| -> (f64, f64) {
            let lse = (a.exp() + b.exp()).ln();
            (a - lse, b - lse)
        };
        let (a0, a1) = ls(1.0, 2.0);
        let (b0, b1) = ls(0.5, -0.5);
        let want = -(0.25 * a0 + 0.75 * a1 + 0.9 * b0 + 0.1 * b1) / 2.0;
        assert!((soft_cross_entropy(&s, &t).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_non_probability_rows() {
        let t = m(&[&[0.5, 0.6]]);
        assert!(matches!(
            soft_cross_entropy(&Matrix::zeros(1, 2), &t),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn node_loss_examples() {
        assert_eq!(
            node_alignment_loss(&Matrix::identity(3), Reduction::Frobenius).unwrap(),
            0.0
        );
        let mut c = Matrix::identity(3);
        c.set(0, 2, 0.5);
        assert!((node_alignment_loss(&c, Reduction::Frobenius).unwrap() - 0.5).abs() < 1e-15);
        assert!(
            (node_alignment_loss(&c, Reduction::MeanSquare).unwrap() - 0.25 / 9.0).abs() < 1e-15
        );
        assert!(node_alignment_loss(&Matrix::zeros(2, 3), Reduction::Frobenius).is_err());
    }

    #[test]
    fn edge_loss_examples() {
        let e = m(&[&[0.3, -0.2], &[0.9, 0.1]]);
        assert_eq!(
            edge_alignment_loss(&e, &e, Reduction::Frobenius).unwrap(),
            0.0
        );
        let shifted = e.map(|v| v - 0.1);
        assert!(
            (edge_alignment_loss(&e, &shifted, Reduction::Frobenius).unwrap() - 0.2).abs() < 1e-12
        );
        assert!(edge_alignment_loss(&e, &Matrix::zeros(2, 3), Reduction::Frobenius).is_err());
    }

    #[test]
    fn edge_loss_teacher_gets_no_gradient() {
        let mut tape = Tape::new();
        let t = tape.leaf(m(&[&[0.3, -0.2], &[0.9, 0.1]]));
        let s = tape.leaf(m(&[&[0.1, 0.2], &[0.4, 0.0]]));
        let loss = edge_alignment_loss_on_tape(&mut tape, t, s, Reduction::Frobenius).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get_or_zeros(t), Matrix::zeros(2, 2));
        assert!(g.get(s).unwrap().frobenius_norm() > 0.0);
    }

    #[test]
    fn prg_and_total() {
        let w = LossWeights::default();
        assert!((prg_loss(1.0, 1.0, &w) - 0.6).abs() < 1e-15);
        let node_only = LossWeights {
            lambda_edge: 0.0,
            ..w
        };
        assert_eq!(prg_loss(2.0, 5.0, &node_only), 0.8);
        let edge_only = LossWeights {
            lambda_node: 0.0,
            ..w
        };
        assert_eq!(prg_loss(2.0, 5.0, &edge_only), 1.0);
        assert_eq!(total_loss(0.5, 0.6), 1.1);
        assert_eq!(total_loss(0.7, 0.0), 0.7);
    }

    #[test]
    fn kd_examples() {
        let s = m(&[&[0.3, 1.2, -0.7]]);
        assert!(kd_baseline_loss(&s, &s, 4.0).unwrap().abs() < 1e-15);
        assert!(kd_baseline_loss(&s, &s, 0.0).is_err());
        // b = 1, c = 2 direct formula
        let (st, tt, temp) = (m(&[&[1.0, 0.0]]), m(&[&[0.0, 2.0]]), 2.0);
        let sm = |a: f64, b: f64| {
            let z = a.exp() + b.exp();
            (a.exp() / z, b.exp() / z)
        };
        let (p0, p1) = sm(0.0, 1.0);
        let (q0, q1) = sm(0.5, 0.0);
        let want = temp * temp * (p0 * (p0 / q0).ln() + p1 * (p1 / q1).ln());
        assert!((kd_baseline_loss(&st, &tt, temp).unwrap() - want).abs() < 1e-12);
    }
}
