//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Largest `|g_ad - g_fd| / max(1, |g_fd|)` over every entry of every input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (input index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
}

/// Checks the reverse-mode gradient of a scalar function of one matrix.
pub fn finite_diff_gradcheck<F>(f: F, x: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = gradcheck_many(|t, v| f(t, v[0]), std::slice::from_ref(x), h, |_| {})?;
    Ok(report.max_rel_error)
}

/// Multi-input variant. `tamper` sees the reverse-mode gradients before the
/// comparison, which lets tests inject faults.
pub fn gradcheck_many<F, T>(f: F, xs: &[Matrix], h: f64, tamper: T) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    T: FnOnce(&mut [Matrix]),
{
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step h must be > 0, got {h}")));
    }

    let eval = |inputs: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value is {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Matrix> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    tamper(&mut analytic);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    let mut probe: Vec<Matrix> = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        for e in 0..x.len() {
            let orig = x.data()[e];
            probe[k].data_mut()[e] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[e] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[e] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let err = (analytic[k].data()[e] - fd).abs() / fd.abs().max(1.0);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (k, e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Matrix::from_fn(3, 4, |r, c| 0.2 * (r as f64 - 1.3) * (c as f64 - 1.4));
        let err = finite_diff_gradcheck(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = Matrix::scalar(1.0);
        assert!(finite_diff_gradcheck(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_value_is_numeric_error() {
        let x = Matrix::scalar(1.0);
        let r = finite_diff_gradcheck(|t, v| Ok(t.scale(v, f64::INFINITY)), &x, 1e-6);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn tamper_is_detected() {
        let x = Matrix::from_fn(2, 2, |r, c| 1.0 + r as f64 + 0.5 * c as f64);
        let f = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        };
        let clean = gradcheck_many(f, std::slice::from_ref(&x), 1e-6, |_| {}).unwrap();
        assert!(clean.max_rel_error < 1e-8);
        let flipped = gradcheck_many(f, std::slice::from_ref(&x), 1e-6, |g| {
            g[0].data_mut()[3] *= -1.0
        })
        .unwrap();
        assert!(flipped.max_rel_error > 1.0);
        assert_eq!(flipped.worst, (0, 3));
    }
}
