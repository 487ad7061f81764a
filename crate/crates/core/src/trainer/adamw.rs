//! AdamW with decoupled weight decay on weight matrices only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::student::StudentParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &StudentParams) -> Self {
        let zeros: Vec<Matrix> = params
            .params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update followed by `p ← p − lr·wd·p` on weights.
pub fn adamw_step(
    params: &mut StudentParams,
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let n = params.params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Validation(format!(
            "adamw_step: {n} params, {} grads, {} moment pairs",
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.params.iter().zip(grads).enumerate() {
        if !p.value.same_shape(g)
            || !p.value.same_shape(&state.m[i])
            || !p.value.same_shape(&state.v[i])
        {
            return Err(Error::Validation(format!(
                "adamw_step: shape mismatch for {}",
                p.name
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, param) in params.params.iter_mut().enumerate() {
        let decay = if param.is_bias() {
            0.0
        } else {
            lr * cfg.weight_decay
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        for (k, p) in param.value.data_mut().iter_mut().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *p -= decay * *p;
        }
    }
    Ok(())
}
