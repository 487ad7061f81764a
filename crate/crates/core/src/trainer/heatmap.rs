//! Inter-sample correlation heatmaps for teacher features and student projections.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::TeacherBundle;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::numerics::{pcc_matrix, Matrix};
use crate::student::{forward, StudentParams};

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapResult {
    pub classes: Vec<usize>,
    pub samples: Vec<usize>,
    pub teacher_matrix: Matrix,
    pub student_matrix: Matrix,
    pub mean_offdiag_teacher: f64,
    pub mean_offdiag_student: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeatmapSummary {
    classes: Vec<usize>,
    samples: Vec<usize>,
    mean_offdiag_teacher: f64,
    mean_offdiag_student: f64,
}

/// Mean |r| over pairs whose samples belong to different classes.
fn mean_inter_class(m: &Matrix, group: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if group[i] != group[j] {
                total += m.get(i, j).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Picks `k_classes` classes and `n_per_class` samples of each (seeded) and
/// correlates their teacher features and student projected features.
pub fn heatmap_metrics(
    params: &StudentParams,
    bundle: &TeacherBundle,
    k_classes: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<HeatmapResult> {
    let labels = bundle
        .labels()
        .ok_or_else(|| Error::Validation("heatmap needs a bundle with labels".into()))?;
    let c = bundle.manifest().n_classes;
    if k_classes == 0 || k_classes > c {
        return Err(Error::Validation(format!(
            "classes must be in [1, {c}], got {k_classes}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Validation("per-class count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut rng);
    classes.truncate(k_classes);
    classes.sort_unstable();

    let mut samples = Vec::with_capacity(k_classes * n_per_class);
    let mut group = Vec::with_capacity(k_classes * n_per_class);
    for &class in &classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < n_per_class {
            return Err(Error::Validation(format!(
                "class {class} has {} samples, need {n_per_class}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        members.truncate(n_per_class);
        members.sort_unstable();
        group.extend(std::iter::repeat_n(class, n_per_class));
        samples.extend(members);
    }

    let teacher = bundle.features().select_rows(&samples)?;
    let (_, student, _) = forward(params, &bundle.inputs().select_rows(&samples)?)?;
    let teacher_matrix = pcc_matrix(&teacher, &teacher)?;
    let student_matrix = pcc_matrix(&student, &student)?;
    Ok(HeatmapResult {
        mean_offdiag_teacher: mean_inter_class(&teacher_matrix, &group),
        mean_offdiag_student: mean_inter_class(&student_matrix, &group),
        classes,
        samples,
        teacher_matrix,
        student_matrix,
    })
}

fn csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes `teacher.csv`, `student.csv` and `summary.json` into `dir`.
pub fn write_heatmap(result: &HeatmapResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fsutil::write(
        &dir.join("teacher.csv"),
        csv(&result.teacher_matrix).as_bytes(),
    )?;
    fsutil::write(
        &dir.join("student.csv"),
        csv(&result.student_matrix).as_bytes(),
    )?;
    fsutil::write_json(
        &dir.join("summary.json"),
        &HeatmapSummary {
            classes: result.classes.clone(),
            samples: result.samples.clone(),
            mean_offdiag_teacher: result.mean_offdiag_teacher,
            mean_offdiag_student: result.mean_offdiag_student,
        },
    )
}
