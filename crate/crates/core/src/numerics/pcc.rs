//! Pearson correlation between vectors and between the rows of two matrices.

use crate::error::{Error, Result};

use super::matrix::{dot, Matrix};

/// Rows whose centered norm falls at or below this are treated as constant.
pub const PCC_EPS: f64 = 1e-8;

/// Pearson correlation of two equal-length vectors.
///
/// Returns 0 when either vector is constant (centered norm ≤ [`PCC_EPS`]).
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "pcc",
            format!("lengths {} vs {}", x.len(), y.len()),
        ));
    }
    if x.len() < 2 {
        return Err(Error::shape("pcc", format!("need D >= 2, got {}", x.len())));
    }
    let (xc, sx) = centered(x);
    let (yc, sy) = centered(y);
    if sx <= PCC_EPS || sy <= PCC_EPS {
        return Ok(0.0);
    }
    Ok((dot(&xc, &yc) / (sx * sy)).clamp(-1.0, 1.0))
}

/// Entry `(i, j)` is `pcc(a.row(i), b.row(j))`.
pub fn pcc_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_pcc_operands(a, b)?;
    let sa = Standardized::new(a);
    let sb = Standardized::new(b);
    Ok(sa.correlate(&sb))
}

pub(crate) fn check_pcc_operands(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "pcc_matrix",
            format!("column counts {} vs {}", a.cols(), b.cols()),
        ));
    }
    if a.cols() < 2 {
        return Err(Error::shape(
            "pcc_matrix",
            format!("need D >= 2, got {}", a.cols()),
        ));
    }
    Ok(())
}

fn centered(x: &[f64]) -> (Vec<f64>, f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let xc: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let norm = dot(&xc, &xc).sqrt();
    (xc, norm)
}

/// Rows centered and scaled to unit norm; constant rows become zero rows.
pub(crate) struct Standardized {
    pub unit: Matrix,
    /// Centered norm of each row, or 0 for rows treated as constant.
    pub norms: Vec<f64>,
}

impl Standardized {
    pub fn new(m: &Matrix) -> Self {
        let mut unit = Matrix::zeros(m.rows(), m.cols());
        let mut norms = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let (xc, norm) = centered(m.row(r));
            if norm <= PCC_EPS {
                norms.push(0.0);
                continue;
            }
            for (o, v) in unit.row_mut(r).iter_mut().zip(&xc) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        Self { unit, norms }
    }

    pub fn correlate(&self, other: &Standardized) -> Matrix {
        let mut out = Matrix::from_fn(self.unit.rows(), other.unit.rows(), |i, j| {
            dot(self.unit.row(i), other.unit.row(j))
        });
        for v in out.data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        out
    }

    /// Gradient w.r.t. the raw rows of `self` given upstream `g = ∂L/∂R`
    /// where `R = self.correlate(other)`.
    ///
    /// For row `i` with centered norm `s_i`:
    /// `∂L/∂x_i = Σ_j g_ij (u_j - r_ij û_i) / s_i`, where `û_i` and `u_j`
    /// are the standardized rows. The centering Jacobian drops out because
    /// both terms are already mean-zero.
    pub fn backward(&self, other: &Standardized, r: &Matrix, g: &Matrix) -> Matrix {
        let d = self.unit.cols();
        let mut out = Matrix::zeros(self.unit.rows(), d);
        for i in 0..self.unit.rows() {
            let s = self.norms[i];
            if s == 0.0 {
                continue;
            }
            let ui = self.unit.row(i);
            let mut acc = vec![0.0; d];
            let mut coeff_self = 0.0;
            for j in 0..other.unit.rows() {
                let gij = g.get(i, j);
                if gij == 0.0 {
                    continue;
                }
                for (a, u) in acc.iter_mut().zip(other.unit.row(j)) {
                    *a += gij * u;
                }
                coeff_self += gij * r.get(i, j);
            }
            for ((o, a), u) in out.row_mut(i).iter_mut().zip(&acc).zip(ui) {
                *o = (a - coeff_self * u) / s;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_examples() {
        assert!((pcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pcc(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn short_vectors_rejected() {
        assert!(matches!(pcc(&[1.0], &[2.0]), Err(Error::Shape { .. })));
        assert!(pcc(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn matrix_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let b = Matrix::from_rows(&[[2.0, 4.0, 6.0]]).unwrap();
        assert!((pcc_matrix(&a, &b).unwrap().item() - 1.0).abs() < 1e-15);

        let a = Matrix::from_fn(3, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 + 0.1 * c as f64);
        let b = Matrix::from_fn(2, 4, |r, c| ((r * 2 + c * c) % 7) as f64);
        let e = pcc_matrix(&a, &b).unwrap();
        assert_eq!(e.shape(), (3, 2));
        for i in 0..3 {
            for j in 0..2 {
                let want = pcc(a.row(i), b.row(j)).unwrap();
                assert!((e.get(i, j) - want).abs() < 1e-14);
            }
        }
        let aa = pcc_matrix(&a, &a).unwrap();
        for i in 0..3 {
            assert!((aa.get(i, i) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn column_mismatch() {
        assert!(pcc_matrix(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4)).is_err());
    }
}
