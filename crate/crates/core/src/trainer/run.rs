//! Training with on-disk outputs: metrics, checkpoints, summary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::TeacherBundle;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::student::StudentConfig;

use super::{load_checkpoint, save_checkpoint, EpochRecord, TrainConfig, TrainHistory, Trainer};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_epoch: Option<EpochRecord>,
    pub best_epoch: Option<EpochRecord>,
    pub label_reads_during_training: usize,
}

/// Trains (or resumes) and writes `metrics.jsonl`, `checkpoint/` (latest),
/// `best/` (highest eval teacher agreement) and `summary.json` under `out`.
pub fn run_training(
    bundle: &TeacherBundle,
    student_cfg: &StudentConfig,
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(TrainHistory, RunSummary)> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);

    let (mut trainer, student_cfg) = match resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            let scfg = ckpt.manifest.student_config.clone();
            (Trainer::from_state(bundle, cfg, ckpt.state)?, scfg)
        }
        None => {
            // fresh run: start a new metrics file
            if metrics_path.exists() {
                fs::remove_file(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            }
            (Trainer::new(bundle, student_cfg, cfg)?, student_cfg.clone())
        }
    };

    let mut history = TrainHistory::default();
    let mut best: Option<f64> = None;
    while !trainer.is_finished() {
        let record = trainer.run_epoch(&mut |_| {})?;
        append_metrics(&metrics_path, &record)?;
        save_checkpoint(&out.join("checkpoint"), trainer.state(), &student_cfg, cfg)?;
        if best.is_none_or(|b| record.teacher_agreement > b) {
            best = Some(record.teacher_agreement);
            save_checkpoint(&out.join("best"), trainer.state(), &student_cfg, cfg)?;
        }
        history.records.push(record);
    }

    let summary = RunSummary {
        final_epoch: history.last().cloned(),
        best_epoch: history.best().cloned(),
        label_reads_during_training: bundle.label_reads_during_training(),
    };
    fsutil::write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok((history, summary))
}

fn append_metrics(path: &Path, record: &EpochRecord) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::Json {
        file: METRICS_FILE.into(),
        source: e,
    })?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
