//! Dense `f64` matrices, reverse-mode differentiation and Pearson correlation.

mod gradcheck;
mod matrix;
mod pcc;
mod tape;

pub use gradcheck::{finite_diff_gradcheck, gradcheck_many, GradcheckReport, DEFAULT_STEP};
pub use matrix::Matrix;
pub use pcc::{pcc, pcc_matrix, PCC_EPS};
pub use tape::{Gradients, Tape, Var};

use crate::error::Result;

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    x.softmax_rows()
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn every_primitive_passes_gradcheck_at_ten_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = random(&mut rng, 3, 4);
            let b = random(&mut rng, 4, 2);
            let c = random(&mut rng, 2, 4);
            let bias = random(&mut rng, 1, 4);
            let w = random(&mut rng, 3, 6);
            let q = random(&mut rng, 2, 10);
            let inputs = [a, b, c, bias, w, q];
            let report = gradcheck_many(
                |t, v| {
                    let ab = t.matmul(v[0], v[1])?; // 3x2
                    let abc = t.matmul(ab, v[2])?; // 3x4
                    let biased = t.add_row_bias(abc, v[3])?;
                    let act = t.relu(biased);
                    let mixed = t.sub(act, v[0])?;
                    let cat = t.concat_cols(mixed, v[4])?; // 3x10
                    let scaled = t.scale(cat, 0.3);
                    let ls = t.log_softmax_rows(scaled);
                    let normed = t.normalize_rows(cat);
                    let corr = t.pcc_matrix(cat, v[5])?;
                    let corr_sq = t.mul(corr, corr)?;
                    let c_sum = t.sum(corr_sq);
                    let prod = t.mul(ls, normed)?;
                    let s = t.sum(prod);
                    let f = t.frobenius(cat);
                    let m = t.mean(ls);
                    let tot = t.add(s, f)?;
                    let tot = t.add(tot, c_sum)?;
                    t.add(tot, m)
                },
                &inputs,
                DEFAULT_STEP,
                |_| {},
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{report:?}");
        }
    }
}
