//! Training checkpoints.
//!
//! ```text
//! params.f64 / params.json       student parameters + shape index
//! adam_m.f64 / adam_m.json       first moments
//! adam_v.f64 / adam_v.json       second moments
//! proxy_t.f64, proxy_s.f64       c × D proxy banks, raw little-endian f64
//! resume.json                    counters, bank metadata, configs
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{self, write_dir_atomically};
use crate::graph::ProxyBank;
use crate::numerics::Matrix;
use crate::student::{load_matrices, load_params, save_matrices, save_params, StudentConfig};

use super::{AdamState, TrainConfig, TrainState};

pub const RESUME_FILE: &str = "resume.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub rows: usize,
    pub cols: usize,
    pub alpha: f64,
    pub update_count: u64,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeManifest {
    pub epochs_completed: usize,
    pub iteration: u64,
    pub adam_step: u64,
    pub proxy_t: BankMeta,
    pub proxy_s: BankMeta,
    pub student_config: StudentConfig,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub manifest: ResumeManifest,
}

fn bank_meta(b: &ProxyBank) -> BankMeta {
    BankMeta {
        rows: b.proxies.rows(),
        cols: b.proxies.cols(),
        alpha: b.alpha,
        update_count: b.update_count,
        init_seed: b.init_seed,
    }
}

fn f64_bytes(m: &Matrix) -> Vec<u8> {
    m.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_bank(dir: &Path, file: &str, meta: &BankMeta) -> Result<ProxyBank> {
    let bytes = fsutil::read(&dir.join(file))?;
    if bytes.len() != meta.rows * meta.cols * 8 {
        return Err(Error::Format {
            file: file.into(),
            detail: format!(
                "{} bytes, resume manifest implies {}x{} f64",
                bytes.len(),
                meta.rows,
                meta.cols
            ),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(ProxyBank {
        proxies: Matrix::new(meta.rows, meta.cols, data)?,
        alpha: meta.alpha,
        update_count: meta.update_count,
        init_seed: meta.init_seed,
    })
}

pub fn save_checkpoint(
    dir: &Path,
    state: &TrainState,
    student_cfg: &StudentConfig,
    cfg: &TrainConfig,
) -> Result<()> {
    let manifest = ResumeManifest {
        epochs_completed: state.epochs_completed,
        iteration: state.iteration,
        adam_step: state.adam.step,
        proxy_t: bank_meta(&state.proxy_t),
        proxy_s: bank_meta(&state.proxy_s),
        student_config: student_cfg.clone(),
        train_config: cfg.clone(),
    };
    let names: Vec<String> = state.params.params.iter().map(|p| p.name.clone()).collect();
    let moments = |ms: &[Matrix]| -> Vec<(String, Matrix)> {
        names.iter().cloned().zip(ms.iter().cloned()).collect()
    };
    write_dir_atomically(dir, |tmp| {
        save_params(&state.params, tmp)?;
        save_matrices(
            tmp,
            "adam_m",
            &moments(&state.adam.m),
            state.params.backbone_layers,
        )?;
        save_matrices(
            tmp,
            "adam_v",
            &moments(&state.adam.v),
            state.params.backbone_layers,
        )?;
        fsutil::write(&tmp.join("proxy_t.f64"), &f64_bytes(&state.proxy_t.proxies))?;
        fsutil::write(&tmp.join("proxy_s.f64"), &f64_bytes(&state.proxy_s.proxies))?;
        fsutil::write_json(&tmp.join(RESUME_FILE), &manifest)
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: ResumeManifest = fsutil::read_json(&dir.join(RESUME_FILE))?;
    let params = load_params(dir)?;
    let (m, _) = load_matrices(dir, "adam_m")?;
    let (v, _) = load_matrices(dir, "adam_v")?;
    let adam = AdamState {
        step: manifest.adam_step,
        m: m.into_iter().map(|(_, x)| x).collect(),
        v: v.into_iter().map(|(_, x)| x).collect(),
    };
    for (i, p) in params.params.iter().enumerate() {
        let ok = adam.m.get(i).is_some_and(|x| x.same_shape(&p.value))
            && adam.v.get(i).is_some_and(|x| x.same_shape(&p.value));
        if !ok {
            return Err(Error::Validation(format!(
                "optimizer moments do not match parameter {}",
                p.name
            )));
        }
    }
    let state = TrainState {
        params,
        adam,
        proxy_t: read_bank(dir, "proxy_t.f64", &manifest.proxy_t)?,
        proxy_s: read_bank(dir, "proxy_s.f64", &manifest.proxy_s)?,
        epochs_completed: manifest.epochs_completed,
        iteration: manifest.iteration,
    };
    Ok(Checkpoint { state, manifest })
}
