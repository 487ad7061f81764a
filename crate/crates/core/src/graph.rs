//! Proxy relational graph: sample nodes, class-proxy banks and PCC edges.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pcc_matrix, Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Teacher,
    Student,
}

/// Integrated embeddings, one row per sample: features then logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleNodeSet {
    pub nodes: Matrix,
    pub side: Side,
}

impl SampleNodeSet {
    pub fn len(&self) -> usize {
        self.nodes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.nodes.cols()
    }
}

fn check_rows(features: &Matrix, logits: &Matrix) -> Result<()> {
    if features.rows() != logits.rows() {
        return Err(Error::shape(
            "build_nodes",
            format!(
                "{} feature rows vs {} logit rows",
                features.rows(),
                logits.rows()
            ),
        ));
    }
    Ok(())
}

/// Concatenates `features ⧺ logits` row by row (raw logits, not softmaxed).
pub fn build_nodes(features: &Matrix, logits: &Matrix, side: Side) -> Result<SampleNodeSet> {
    check_rows(features, logits)?;
    Ok(SampleNodeSet {
        nodes: features.concat_cols(logits)?,
        side,
    })
}

/// Differentiable [`build_nodes`]. With `standardize`, each block is scaled
/// to unit row norm before concatenation.
pub fn build_nodes_on_tape(
    tape: &mut Tape,
    features: Var,
    logits: Var,
    standardize: bool,
) -> Result<Var> {
    check_rows(tape.value(features), tape.value(logits))?;
    let (f, l) = if standardize {
        (tape.normalize_rows(features), tape.normalize_rows(logits))
    } else {
        (features, logits)
    };
    tape.concat_cols(f, l)
}

/// Value-level node standardization matching [`build_nodes_on_tape`].
pub fn standardized_nodes(features: &Matrix, logits: &Matrix, side: Side) -> Result<SampleNodeSet> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let l = tape.constant(logits.clone());
    let n = build_nodes_on_tape(&mut tape, f, l, true)?;
    Ok(SampleNodeSet {
        nodes: tape.value(n).clone(),
        side,
    })
}

/// Class-proxy nodes, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyBank {
    pub proxies: Matrix,
    pub alpha: f64,
    pub update_count: u64,
    pub init_seed: u64,
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )))
    }
}

/// Standard-normal `c × dim` bank, deterministic in `seed`.
pub fn init_proxy_bank(c: usize, dim: usize, alpha: f64, seed: u64) -> Result<ProxyBank> {
    check_alpha(alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proxies = Matrix::from_fn(c, dim, |_, _| StandardNormal.sample(&mut rng));
    Ok(ProxyBank {
        proxies,
        alpha,
        update_count: 0,
        init_seed: seed,
    })
}

impl ProxyBank {
    pub fn n_classes(&self) -> usize {
        self.proxies.rows()
    }

    pub fn dim(&self) -> usize {
        self.proxies.cols()
    }

    /// `P_i ← P_i + α · mean_{f ∈ F_i}(f − P_i)` for every class with assigned
    /// nodes, all classes using their pre-update proxy.
    pub fn update(&mut self, nodes: &Matrix, assignment: &[usize]) -> Result<()> {
        let (c, dim) = self.proxies.shape();
        if nodes.cols() != dim {
            return Err(Error::shape(
                "update_proxies",
                format!("node dim {} vs proxy dim {dim}", nodes.cols()),
            ));
        }
        if assignment.len() != nodes.rows() {
            return Err(Error::shape(
                "update_proxies",
                format!(
                    "{} assignments for {} nodes",
                    assignment.len(),
                    nodes.rows()
                ),
            ));
        }
        if let Some(&bad) = assignment.iter().find(|&&a| a >= c) {
            return Err(Error::Validation(format!(
                "assignment {bad} out of range [0, {c})"
            )));
        }

        let mut sums = Matrix::zeros(c, dim);
        let mut counts = vec![0usize; c];
        for (r, &class) in assignment.iter().enumerate() {
            counts[class] += 1;
            for ((s, f), p) in sums
                .row_mut(class)
                .iter_mut()
                .zip(nodes.row(r))
                .zip(self.proxies.row(class))
            {
                *s += f - p;
            }
        }
        let alpha = self.alpha;
        for (class, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            let delta = sums.row(class).to_vec();
            for (p, d) in self.proxies.row_mut(class).iter_mut().zip(delta) {
                *p += alpha * (d * inv);
            }
        }
        self.update_count += 1;
        Ok(())
    }
}

pub fn update_proxies(
    bank: &ProxyBank,
    nodes: &SampleNodeSet,
    assignment: &[usize],
) -> Result<ProxyBank> {
    let mut next = bank.clone();
    next.update(&nodes.nodes, assignment)?;
    Ok(next)
}

fn check_bank_dim(op: &'static str, nodes: &Matrix, bank: &ProxyBank) -> Result<()> {
    if nodes.cols() != bank.dim() {
        return Err(Error::shape(
            op,
            format!("node dim {} vs proxy dim {}", nodes.cols(), bank.dim()),
        ));
    }
    Ok(())
}

/// `b × c` correlations between sample nodes and class proxies.
pub fn edge_matrix(nodes: &SampleNodeSet, bank: &ProxyBank) -> Result<Matrix> {
    check_bank_dim("edge_matrix", &nodes.nodes, bank)?;
    pcc_matrix(&nodes.nodes, &bank.proxies)
}

/// Differentiable [`edge_matrix`]; the proxies enter as constants.
pub fn edge_matrix_on_tape(tape: &mut Tape, nodes: Var, bank: &ProxyBank) -> Result<Var> {
    check_bank_dim("edge_matrix", tape.value(nodes), bank)?;
    let p = tape.constant(bank.proxies.clone());
    tape.pcc_matrix(nodes, p)
}

fn check_pair(teacher: &Matrix, student: &Matrix) -> Result<()> {
    if teacher.shape() != student.shape() {
        return Err(Error::shape(
            "node_cross_correlation",
            format!(
                "teacher {:?} vs student {:?}",
                teacher.shape(),
                student.shape()
            ),
        ));
    }
    Ok(())
}

/// `b × b` correlations, entry `(i, j)` between teacher node `i` and student node `j`.
pub fn node_cross_correlation(teacher: &SampleNodeSet, student: &SampleNodeSet) -> Result<Matrix> {
    check_pair(&teacher.nodes, &student.nodes)?;
    pcc_matrix(&teacher.nodes, &student.nodes)
}

/// Differentiable [`node_cross_correlation`]; the teacher side is detached.
pub fn node_cross_correlation_on_tape(tape: &mut Tape, teacher: Var, student: Var) -> Result<Var> {
    check_pair(tape.value(teacher), tape.value(student))?;
    let t = tape.detach(teacher);
    tape.pcc_matrix(t, student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::pcc;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn node_concatenation() {
        let n = build_nodes(&m(&[&[1.0, 0.0]]), &m(&[&[3.0, 4.0]]), Side::Teacher).unwrap();
        assert_eq!(n.nodes, m(&[&[1.0, 0.0, 3.0, 4.0]]));
        let empty = build_nodes(&Matrix::zeros(0, 2), &Matrix::zeros(0, 3), Side::Student).unwrap();
        assert!(empty.is_empty());
        assert!(build_nodes(&Matrix::zeros(4, 2), &Matrix::zeros(3, 2), Side::Student).is_err());
    }

    #[test]
    fn bank_init() {
        let a = init_proxy_bank(3, 5, 0.1, 9).unwrap();
        assert_eq!(a, init_proxy_bank(3, 5, 0.1, 9).unwrap());
        assert_ne!(a.proxies, init_proxy_bank(3, 5, 0.1, 10).unwrap().proxies);
        for alpha in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(init_proxy_bank(3, 5, alpha, 9).is_err());
        }
    }

    #[test]
    fn bank_init_moments() {
        let bank = init_proxy_bank(100, 100, 0.5, 3).unwrap();
        let mean = bank.proxies.mean();
        let var = bank.proxies.map(|v| (v - mean).powi(2)).mean();
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn update_hand_case() {
        let mut bank = ProxyBank {
            proxies: m(&[&[0.0, 0.0], &[7.0, -3.0]]),
            alpha: 0.5,
            update_count: 0,
            init_seed: 0,
        };
        let before_row1 = bank.proxies.row(1).to_vec();
        bank.update(&m(&[&[2.0, 2.0], &[2.0, 2.0]]), &[0, 0])
            .unwrap();
        assert_eq!(bank.proxies.row(0), &[1.0, 1.0]);
        assert_eq!(bank.proxies.row(1), before_row1.as_slice());
        assert_eq!(bank.update_count, 1);
    }

    #[test]
    fn update_rejects_bad_assignment() {
        let mut bank = init_proxy_bank(2, 3, 0.1, 0).unwrap();
        assert!(matches!(
            bank.update(&Matrix::zeros(1, 3), &[2]),
            Err(Error::Validation(_))
        ));
        assert!(bank.update(&Matrix::zeros(1, 4), &[0]).is_err());
        assert_eq!(bank.update_count, 0);
    }

    #[test]
    fn edge_examples() {
        let bank = ProxyBank {
            proxies: m(&[
                &[1.0, 2.0, 0.0, 5.0],
                &[0.5, -1.0, 2.0, 3.0],
                &[3.0, 1.0, 4.0, 1.0],
            ]),
            alpha: 0.1,
            update_count: 0,
            init_seed: 0,
        };
        let nodes = SampleNodeSet {
            nodes: m(&[
                &[1.0, 2.0, 0.0, 5.0],
                &[-0.5 + 7.0, 1.0 + 7.0, -2.0 + 7.0, -3.0 + 7.0],
                &[0.3, 0.1, -0.4, 0.9],
                &[2.0, 2.5, 1.0, -1.0],
            ]),
            side: Side::Student,
        };
        let e = edge_matrix(&nodes, &bank).unwrap();
        assert!((e.get(0, 0) - 1.0).abs() < 1e-14);
        assert!((e.get(1, 1) + 1.0).abs() < 1e-14);
        for i in 0..4 {
            for j in 0..3 {
                let want = pcc(nodes.nodes.row(i), bank.proxies.row(j)).unwrap();
                assert!((e.get(i, j) - want).abs() < 1e-14);
            }
        }
        let wrong = SampleNodeSet {
            nodes: Matrix::zeros(2, 5),
            side: Side::Student,
        };
        assert!(edge_matrix(&wrong, &bank).is_err());
    }

    #[test]
    fn cross_correlation_diagonals() {
        let t = m(&[&[1.0, 3.0, -2.0], &[0.5, 0.4, 2.0]]);
        let teacher = SampleNodeSet {
            nodes: t.clone(),
            side: Side::Teacher,
        };
        for student in [t.clone(), t.map(|v| 2.0 * v + 5.0)] {
            let s = SampleNodeSet {
                nodes: student,
                side: Side::Student,
            };
            let c = node_cross_correlation(&teacher, &s).unwrap();
            for i in 0..2 {
                assert!((c.get(i, i) - 1.0).abs() < 1e-14);
            }
        }
        let short = SampleNodeSet {
            nodes: Matrix::zeros(1, 3),
            side: Side::Student,
        };
        assert!(node_cross_correlation(&teacher, &short).is_err());
    }
}
