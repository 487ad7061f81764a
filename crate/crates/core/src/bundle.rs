//! The teacher bundle: a directory of precomputed teacher outputs.
//!
//! Layout (all arrays little-endian, row-major, no header):
//!
//! ```text
//! manifest.json
//! inputs.f32            N × m
//! features.f32          N × d     unit-norm rows
//! text_embeddings.f32   p × c × d unit-norm rows, prompt-major
//! labels.i64            N         optional, evaluation only
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on load.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{self, write_dir_atomically};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;
pub const NORM_TOLERANCE: f64 = 1e-4;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INPUTS_FILE: &str = "inputs.f32";
pub const FEATURES_FILE: &str = "features.f32";
pub const TEXT_FILE: &str = "text_embeddings.f32";
pub const LABELS_FILE: &str = "labels.i64";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub n_samples: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub n_prompts: usize,
    pub class_names: Vec<String>,
    pub prompt_names: Vec<String>,
    pub has_labels: bool,
    pub split: Split,
    /// Generator seed for synthetic bundles, 0 for exported ones.
    pub seed: u64,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let v = |msg: String| Err(Error::Validation(msg));
        if self.format_version != FORMAT_VERSION {
            return v(format!(
                "format_version: expected {FORMAT_VERSION}, got {}",
                self.format_version
            ));
        }
        if self.n_samples == 0 {
            return v("n_samples: bundle must hold at least one sample".into());
        }
        for (name, value) in [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("n_classes", self.n_classes),
            ("n_prompts", self.n_prompts),
        ] {
            if value == 0 {
                return v(format!("{name}: must be >= 1"));
            }
        }
        if self.class_names.len() != self.n_classes {
            return v(format!(
                "class_names: {} names for n_classes = {}",
                self.class_names.len(),
                self.n_classes
            ));
        }
        if self.prompt_names.len() != self.n_prompts {
            return v(format!(
                "prompt_names: {} names for n_prompts = {}",
                self.prompt_names.len(),
                self.n_prompts
            ));
        }
        let mut seen = vec![false; self.n_samples];
        for (name, list) in [
            ("split.train", &self.split.train),
            ("split.eval", &self.split.eval),
        ] {
            for &i in list {
                if i >= self.n_samples {
                    return v(format!(
                        "{name}: index {i} out of range [0, {})",
                        self.n_samples
                    ));
                }
                if seen[i] {
                    return v(format!(
                        "{name}: index {i} repeated or shared between splits"
                    ));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Counts label reads, and separately those made while a training guard is held.
#[derive(Debug, Default)]
struct LabelAudit {
    reads: AtomicUsize,
    training_reads: AtomicUsize,
    training_active: AtomicUsize,
}

#[derive(Debug)]
pub struct TeacherBundle {
    manifest: Manifest,
    inputs: Matrix,
    features: Matrix,
    text_embeddings: Vec<Matrix>,
    labels: Option<Vec<usize>>,
    audit: LabelAudit,
}

impl Clone for TeacherBundle {
    fn clone(&self) -> Self {
        Self {
            manifest: self.manifest.clone(),
            inputs: self.inputs.clone(),
            features: self.features.clone(),
            text_embeddings: self.text_embeddings.clone(),
            labels: self.labels.clone(),
            audit: LabelAudit::default(),
        }
    }
}

impl PartialEq for TeacherBundle {
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest
            && self.inputs == other.inputs
            && self.features == other.features
            && self.text_embeddings == other.text_embeddings
            && self.labels == other.labels
    }
}

/// Label-free view handed to training code.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub manifest: &'a Manifest,
    pub inputs: &'a Matrix,
    pub features: &'a Matrix,
    pub text_embeddings: &'a [Matrix],
}

/// Marks the bundle as being inside a training phase until dropped.
pub struct TrainingGuard<'a> {
    audit: &'a LabelAudit,
}

impl Drop for TrainingGuard<'_> {
    fn drop(&mut self) {
        self.audit.training_active.fetch_sub(1, Ordering::SeqCst);
    }
}

impl TeacherBundle {
    pub fn new(
        manifest: Manifest,
        inputs: Matrix,
        features: Matrix,
        text_embeddings: Vec<Matrix>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let b = Self {
            manifest,
            inputs,
            features,
            text_embeddings,
            labels,
            audit: LabelAudit::default(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        let n = m.n_samples;
        if self.inputs.shape() != (n, m.input_dim) {
            return Err(Error::Validation(format!(
                "inputs: shape {:?}, manifest says {}x{}",
                self.inputs.shape(),
                n,
                m.input_dim
            )));
        }
        if self.features.shape() != (n, m.feature_dim) {
            return Err(Error::Validation(format!(
                "features: shape {:?}, manifest says {}x{}",
                self.features.shape(),
                n,
                m.feature_dim
            )));
        }
        if self.text_embeddings.len() != m.n_prompts {
            return Err(Error::Validation(format!(
                "text_embeddings: {} prompts, manifest says {}",
                self.text_embeddings.len(),
                m.n_prompts
            )));
        }
        for (i, t) in self.text_embeddings.iter().enumerate() {
            if t.shape() != (m.n_classes, m.feature_dim) {
                return Err(Error::Validation(format!(
                    "text_embeddings[{i}]: shape {:?}, expected {}x{}",
                    t.shape(),
                    m.n_classes,
                    m.feature_dim
                )));
            }
        }
        if !self.inputs.is_finite() {
            return Err(Error::Validation("inputs: non-finite value".into()));
        }
        check_unit_rows("features", &self.features)?;
        for (i, t) in self.text_embeddings.iter().enumerate() {
            check_unit_rows(&format!("text_embeddings[{i}]"), t)?;
        }
        match (&self.labels, m.has_labels) {
            (Some(l), true) => {
                if l.len() != n {
                    return Err(Error::Validation(format!(
                        "labels: {} entries for {n} samples",
                        l.len()
                    )));
                }
                if let Some((i, &y)) = l.iter().enumerate().find(|(_, &y)| y >= m.n_classes) {
                    return Err(Error::Validation(format!(
                        "labels: sample {i} has class {y}, n_classes = {}",
                        m.n_classes
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Validation(
                    "labels: present but manifest has_labels = false".into(),
                ))
            }
            (None, true) => {
                return Err(Error::Validation(
                    "labels: missing but manifest has_labels = true".into(),
                ))
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn text_embeddings(&self) -> &[Matrix] {
        &self.text_embeddings
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Ground-truth labels, for evaluation only. Every call is counted.
    pub fn labels(&self) -> Option<&[usize]> {
        self.audit.reads.fetch_add(1, Ordering::SeqCst);
        if self.audit.training_active.load(Ordering::SeqCst) > 0 {
            self.audit.training_reads.fetch_add(1, Ordering::SeqCst);
        }
        self.labels.as_deref()
    }

    pub fn label_reads(&self) -> usize {
        self.audit.reads.load(Ordering::SeqCst)
    }

    /// Label reads made while a [`TrainingGuard`] was alive.
    pub fn label_reads_during_training(&self) -> usize {
        self.audit.training_reads.load(Ordering::SeqCst)
    }

    pub fn enter_training(&self) -> TrainingGuard<'_> {
        self.audit.training_active.fetch_add(1, Ordering::SeqCst);
        TrainingGuard { audit: &self.audit }
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            manifest: &self.manifest,
            inputs: &self.inputs,
            features: &self.features,
            text_embeddings: &self.text_embeddings,
        }
    }

    /// Copy of the bundle without labels.
    pub fn without_labels(&self) -> Self {
        let mut b = self.clone();
        b.labels = None;
        b.manifest.has_labels = false;
        b
    }
}

fn check_unit_rows(field: &str, m: &Matrix) -> Result<()> {
    for r in 0..m.rows() {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Validation(format!(
                "{field}: row {r} has norm {norm}, expected 1 ± {NORM_TOLERANCE}"
            )));
        }
    }
    Ok(())
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    fsutil::read(&dir.join(name))
}

fn read_f32(dir: &Path, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let bytes = read_file(dir, name)?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Format {
            file: name.into(),
            detail: format!(
                "{} bytes ({} values), manifest implies {}x{} = {} values",
                bytes.len(),
                bytes.len() as f64 / 4.0,
                rows,
                cols,
                rows * cols
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::new(rows, cols, data)
}

fn f32_bytes<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> Vec<u8> {
    let mut out = Vec::new();
    for m in mats {
        out.reserve(m.len() * 4);
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<TeacherBundle> {
    let dir = dir.as_ref();
    let raw = read_file(dir, MANIFEST_FILE)?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::Json {
        file: MANIFEST_FILE.into(),
        source: e,
    })?;
    manifest.validate()?;
    let n = manifest.n_samples;
    let inputs = read_f32(dir, INPUTS_FILE, n, manifest.input_dim)?;
    let features = read_f32(dir, FEATURES_FILE, n, manifest.feature_dim)?;
    let (p, c, d) = (manifest.n_prompts, manifest.n_classes, manifest.feature_dim);
    let stacked = read_f32(dir, TEXT_FILE, p * c, d)?;
    let text_embeddings = (0..p)
        .map(|i| stacked.select_rows(&(i * c..(i + 1) * c).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let labels = if manifest.has_labels {
        let bytes = read_file(dir, LABELS_FILE)?;
        if bytes.len() != n * 8 {
            return Err(Error::Format {
                file: LABELS_FILE.into(),
                detail: format!("{} bytes, manifest implies {n} int64 values", bytes.len()),
            });
        }
        let mut labels = Vec::with_capacity(n);
        for (i, ch) in bytes.chunks_exact(8).enumerate() {
            let v = i64::from_le_bytes(ch.try_into().expect("chunk of 8"));
            if v < 0 {
                return Err(Error::Validation(format!(
                    "labels: sample {i} has class {v}"
                )));
            }
            labels.push(v as usize);
        }
        Some(labels)
    } else {
        None
    };
    TeacherBundle::new(manifest, inputs, features, text_embeddings, labels)
}

/// Writes the bundle into a sibling temp directory and renames it into place.
pub fn save_bundle(bundle: &TeacherBundle, dir: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    write_dir_atomically(dir.as_ref(), |tmp| write_contents(bundle, tmp))
}

fn write_contents(bundle: &TeacherBundle, dir: &Path) -> Result<()> {
    let write = |name: &str, bytes: &[u8]| fsutil::write(&dir.join(name), bytes);
    let manifest = serde_json::to_vec_pretty(&bundle.manifest).map_err(|e| Error::Json {
        file: MANIFEST_FILE.into(),
        source: e,
    })?;
    write(MANIFEST_FILE, &manifest)?;
    write(INPUTS_FILE, &f32_bytes([&bundle.inputs]))?;
    write(FEATURES_FILE, &f32_bytes([&bundle.features]))?;
    write(TEXT_FILE, &f32_bytes(&bundle.text_embeddings))?;
    if let Some(labels) = &bundle.labels {
        let bytes: Vec<u8> = labels
            .iter()
            .flat_map(|&y| (y as i64).to_le_bytes())
            .collect();
        write(LABELS_FILE, &bytes)?;
    }
    Ok(())
}

/// Parameters of the synthetic teacher generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub classes: usize,
    pub prompts: usize,
    pub dim: usize,
    pub input_dim: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.classes < 2 {
            return fail(format!("classes: need >= 2, got {}", self.classes));
        }
        if self.prompts < 1 {
            return fail("prompts: need >= 1".into());
        }
        if self.dim < 4 {
            return fail(format!("dim: need >= 4, got {}", self.dim));
        }
        if self.input_dim < self.dim {
            return fail(format!(
                "input_dim: need >= dim ({}), got {}",
                self.dim, self.input_dim
            ));
        }
        if self.per_class < 1 {
            return fail("per_class: need >= 1".into());
        }
        if !(self.noise > 0.0 && self.noise < 1.0) {
            return fail(format!("noise: need 0 < noise < 1, got {}", self.noise));
        }
        Ok(())
    }
}

/// Deterministic synthetic bundle with a strong zero-shot teacher.
///
/// Perturbations are standard-normal vectors scaled by `1/sqrt(dim)` so that
/// `noise` is the expected perturbation norm relative to a unit class
/// direction. Prompt `i` perturbs the class directions with strength
/// `0.5 · noise · (0.5 + i / p)`, so later prompts describe classes worse.
pub fn synth_bundle(params: &SynthParams) -> Result<TeacherBundle> {
    params.validate()?;
    let SynthParams {
        classes: c,
        prompts: p,
        dim: d,
        input_dim: m,
        per_class,
        noise,
        seed,
    } = *params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let unit_scale = 1.0 / (d as f64).sqrt();

    let mut means = Matrix::from_fn(c, d, |_, _| normal(&mut rng));
    normalize_rows(&mut means);
    let mixing = Matrix::from_fn(d, m, |_, _| normal(&mut rng));

    let n = c * per_class;
    let mut labels = Vec::with_capacity(n);
    let mut features = Matrix::zeros(n, d);
    for j in 0..c {
        for k in 0..per_class {
            let r = j * per_class + k;
            for (o, mu) in features.row_mut(r).iter_mut().zip(means.row(j)) {
                *o = mu + noise * unit_scale * normal(&mut rng);
            }
            labels.push(j);
        }
    }
    normalize_rows(&mut features);

    let mut text_embeddings = Vec::with_capacity(p);
    for i in 0..p {
        let strength = 0.5 * noise * (0.5 + i as f64 / p as f64);
        let mut t = Matrix::from_fn(c, d, |j, col| {
            means.get(j, col) + strength * unit_scale * normal(&mut rng)
        });
        normalize_rows(&mut t);
        text_embeddings.push(t);
    }

    let mut inputs = features.matmul(&mixing)?;
    for v in inputs.data_mut() {
        *v += 0.1 * normal(&mut rng);
    }

    let n_train_per_class = ((per_class as f64 * 0.8).round() as usize).clamp(1, per_class);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for j in 0..c {
        let mut idx: Vec<usize> = (j * per_class..(j + 1) * per_class).collect();
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train_per_class]);
        eval.extend_from_slice(&idx[n_train_per_class..]);
    }
    train.sort_unstable();
    eval.sort_unstable();

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        n_samples: n,
        input_dim: m,
        feature_dim: d,
        n_classes: c,
        n_prompts: p,
        class_names: (0..c).map(|j| format!("class_{j}")).collect(),
        prompt_names: (0..p).map(|i| format!("prompt_{i}")).collect(),
        has_labels: true,
        split: Split { train, eval },
        seed,
    };
    TeacherBundle::new(
        manifest,
        round_f32(inputs),
        round_f32(features),
        text_embeddings.into_iter().map(round_f32).collect(),
        Some(labels),
    )
}

fn normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
}

/// Rounds through `f32` so in-memory values equal what a save/load yields.
fn round_f32(m: Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}
