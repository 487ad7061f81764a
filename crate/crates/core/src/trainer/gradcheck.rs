//! End-to-end finite-difference checks of every objective term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::graph::{init_proxy_bank, ProxyBank};
use crate::losses::{LossWeights, DEFAULT_KD_TEMPERATURE};
use crate::numerics::{gradcheck_many, GradcheckReport, Matrix, Tape};
use crate::student::{init_student, StudentConfig, StudentParams};

use super::objective::{batch_objective, BatchLossVars, Mode, ObjectiveSettings, TeacherCache};
use crate::bundle::{Manifest, Split, TrainView, FORMAT_VERSION};

/// Which scalar of the batch objective is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    SoftCrossEntropy,
    NodeAlignment,
    EdgeAlignment,
    TotalPrg,
    TotalKdBaseline,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::SoftCrossEntropy,
        LossTerm::NodeAlignment,
        LossTerm::EdgeAlignment,
        LossTerm::TotalPrg,
        LossTerm::TotalKdBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::SoftCrossEntropy => "soft_cross_entropy",
            LossTerm::NodeAlignment => "node_alignment",
            LossTerm::EdgeAlignment => "edge_alignment",
            LossTerm::TotalPrg => "total_prg",
            LossTerm::TotalKdBaseline => "total_kd_baseline",
        }
    }

    fn mode(self) -> Mode {
        match self {
            LossTerm::TotalKdBaseline => Mode::KdBaseline,
            _ => Mode::Prg,
        }
    }

    fn pick(self, lv: &BatchLossVars) -> crate::numerics::Var {
        match self {
            LossTerm::SoftCrossEntropy => lv.ce,
            LossTerm::NodeAlignment => lv.node,
            LossTerm::EdgeAlignment => lv.edge,
            LossTerm::TotalPrg | LossTerm::TotalKdBaseline => lv.total,
        }
    }
}

/// Sizes of the random gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckShape {
    pub batch: usize,
    pub classes: usize,
    pub teacher_dim: usize,
    pub prompts: usize,
    pub student_dim: usize,
    pub input_dim: usize,
}

impl Default for GradcheckShape {
    fn default() -> Self {
        Self {
            batch: 4,
            classes: 3,
            teacher_dim: 5,
            prompts: 2,
            student_dim: 6,
            input_dim: 7,
        }
    }
}

/// A seeded random teacher batch, proxy banks and student.
pub struct GradcheckInstance {
    pub inputs: Matrix,
    pub features: Matrix,
    pub text: Vec<Matrix>,
    pub proxy_t: ProxyBank,
    pub proxy_s: ProxyBank,
    pub params: StudentParams,
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    for r in 0..rows {
        let row = m.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    m
}

impl GradcheckInstance {
    pub fn new(shape: GradcheckShape, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = StudentConfig {
            input_dim: shape.input_dim,
            backbone_hidden: vec![8],
            feature_dim: shape.student_dim,
            n_classes: shape.classes,
            teacher_dim: shape.teacher_dim,
            init_seed: seed,
        };
        let init = init_student(&cfg)?;
        // nonzero biases so every affine path is exercised
        let values = init
            .params
            .iter()
            .map(|p| {
                if p.is_bias() {
                    let mut v = p.value.clone();
                    v.data_mut()
                        .iter_mut()
                        .for_each(|x| *x = rng.gen_range(-0.3..0.3));
                    v
                } else {
                    p.value.clone()
                }
            })
            .collect();
        let params = init.with_values(values)?;
        let dim = shape.teacher_dim + shape.classes;
        Ok(Self {
            inputs: Matrix::from_fn(shape.batch, shape.input_dim, |_, _| {
                StandardNormal.sample(&mut rng)
            }),
            features: unit_rows(&mut rng, shape.batch, shape.teacher_dim),
            text: (0..shape.prompts)
                .map(|_| unit_rows(&mut rng, shape.classes, shape.teacher_dim))
                .collect(),
            proxy_t: init_proxy_bank(shape.classes, dim, 0.1, rng.gen())?,
            proxy_s: init_proxy_bank(shape.classes, dim, 0.1, rng.gen())?,
            params,
        })
    }

    /// Max relative error of the reverse-mode gradient of `term` w.r.t. every
    /// student parameter. `tamper` may alter the analytic gradients first.
    pub fn check(
        &self,
        term: LossTerm,
        h: f64,
        tau: f64,
        tamper: impl FnOnce(&mut [Matrix]),
    ) -> Result<GradcheckReport> {
        let settings = ObjectiveSettings {
            mode: term.mode(),
            weights: LossWeights::default(),
            temperature: DEFAULT_KD_TEMPERATURE,
            standardize_nodes: false,
        };
        let b = self.inputs.rows();
        let (c, d) = (self.text[0].rows(), self.features.cols());
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            n_samples: b,
            input_dim: self.inputs.cols(),
            feature_dim: d,
            n_classes: c,
            n_prompts: self.text.len(),
            class_names: (0..c).map(|i| i.to_string()).collect(),
            prompt_names: (0..self.text.len()).map(|i| i.to_string()).collect(),
            has_labels: false,
            split: Split {
                train: (0..b).collect(),
                eval: Vec::new(),
            },
            seed: 0,
        };
        let view = TrainView {
            manifest: &manifest,
            inputs: &self.inputs,
            features: &self.features,
            text_embeddings: &self.text,
        };
        let cache = TeacherCache::new(&view, tau, &settings)?;
        let all: Vec<usize> = (0..b).collect();
        let teacher = cache.batch(&all, &self.proxy_t)?;
        let template = &self.params;
        gradcheck_many(
            |tape: &mut Tape, vars| {
                let x = tape.constant(self.inputs.clone());
                let lv =
                    batch_objective(tape, template, vars, x, &teacher, &self.proxy_s, &settings)?;
                Ok(term.pick(&lv))
            },
            &template.values(),
            h,
            tamper,
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckEntry {
    pub loss: &'static str,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

/// Runs every loss term over `n_seeds` consecutive seeds starting at `seed`.
///
/// With `inject_fault`, the first gradient entry of the classifier bias has
/// its sign flipped before comparison.
pub fn gradcheck_suite(
    seed: u64,
    n_seeds: u64,
    h: f64,
    tau: f64,
    inject_fault: bool,
) -> Result<Vec<GradcheckEntry>> {
    let shape = GradcheckShape::default();
    let mut out = Vec::new();
    for term in LossTerm::ALL {
        let mut entry = GradcheckEntry {
            loss: term.name(),
            max_rel_error: 0.0,
            worst_seed: seed,
        };
        for s in seed..seed + n_seeds {
            let inst = GradcheckInstance::new(shape, s)?;
            let bias_index = 2 * inst.params.backbone_layers + 1;
            let report = inst.check(term, h, tau, |g| {
                if inject_fault {
                    let v = &mut g[bias_index].data_mut()[0];
                    *v = -*v + 1.0;
                }
            })?;
            if report.max_rel_error > entry.max_rel_error || report.max_rel_error.is_nan() {
                entry.max_rel_error = report.max_rel_error;
                entry.worst_seed = s;
            }
        }
        out.push(entry);
    }
    Ok(out)
}
