//! Per-batch loss assembly shared by the training loop and gradient checks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::TrainView;
use crate::error::{Error, Result};
use crate::graph::{
    build_nodes, build_nodes_on_tape, edge_matrix, edge_matrix_on_tape,
    node_cross_correlation_on_tape, standardized_nodes, ProxyBank, SampleNodeSet, Side,
};
use crate::losses::{
    edge_alignment_loss_on_tape, kd_baseline_loss_on_tape, node_alignment_loss_on_tape,
    soft_cross_entropy_on_tape, LossWeights,
};
use crate::numerics::{Matrix, Tape, Var};
use crate::prompt_weighting::{
    plain_zero_shot_logits, soft_labels, teacher_logits, teacher_predictions,
};
use crate::student::StudentParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Soft cross-entropy plus node and edge alignment.
    #[default]
    Prg,
    /// Soft cross-entropy only.
    CeOnly,
    /// Soft cross-entropy plus temperature-scaled logit KD.
    KdBaseline,
    /// `Prg` with the averaged-prompt teacher head.
    PrgPlainLogits,
    /// `Prg` with feature-only nodes.
    PrgFeatureNodes,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Prg,
        Mode::CeOnly,
        Mode::KdBaseline,
        Mode::PrgPlainLogits,
        Mode::PrgFeatureNodes,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Prg => "prg",
            Mode::CeOnly => "ce_only",
            Mode::KdBaseline => "kd_baseline",
            Mode::PrgPlainLogits => "prg_plain_logits",
            Mode::PrgFeatureNodes => "prg_feature_nodes",
        }
    }

    pub fn uses_graph_losses(self) -> bool {
        matches!(
            self,
            Mode::Prg | Mode::PrgPlainLogits | Mode::PrgFeatureNodes
        )
    }

    pub fn logits_in_nodes(self) -> bool {
        self != Mode::PrgFeatureNodes
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub mode: Mode,
    pub weights: LossWeights,
    pub temperature: f64,
    pub standardize_nodes: bool,
}

/// Node dimension for a mode: `d + c`, or `d` with feature-only nodes.
pub fn node_dim(mode: Mode, feature_dim: usize, n_classes: usize) -> usize {
    if mode.logits_in_nodes() {
        feature_dim + n_classes
    } else {
        feature_dim
    }
}

fn nodes_from(
    features: &Matrix,
    logits: &Matrix,
    s: &ObjectiveSettings,
    side: Side,
) -> Result<SampleNodeSet> {
    match (s.mode.logits_in_nodes(), s.standardize_nodes) {
        (true, false) => build_nodes(features, logits, side),
        (true, true) => standardized_nodes(features, logits, side),
        (false, false) => Ok(SampleNodeSet {
            nodes: features.clone(),
            side,
        }),
        (false, true) => {
            let mut tape = Tape::new();
            let f = tape.constant(features.clone());
            let n = tape.normalize_rows(f);
            Ok(SampleNodeSet {
                nodes: tape.value(n).clone(),
                side,
            })
        }
    }
}

fn nodes_on_tape(
    tape: &mut Tape,
    features: Var,
    logits: Var,
    s: &ObjectiveSettings,
) -> Result<Var> {
    if s.mode.logits_in_nodes() {
        build_nodes_on_tape(tape, features, logits, s.standardize_nodes)
    } else if s.standardize_nodes {
        Ok(tape.normalize_rows(features))
    } else {
        Ok(features)
    }
}

/// Teacher quantities for every sample, computed once per run.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    /// Logits driving soft labels, nodes and proxy assignment for this mode.
    pub logits: Matrix,
    pub soft_labels: Matrix,
    pub predictions: Vec<usize>,
    pub nodes: Matrix,
    /// Predictions of the prompt-weighted head, the agreement reference in every mode.
    pub reference_predictions: Vec<usize>,
}

/// One batch of teacher targets.
#[derive(Debug, Clone)]
pub struct TeacherBatch {
    pub logits: Matrix,
    pub soft_labels: Matrix,
    pub nodes: Matrix,
    pub edges: Matrix,
    pub assignment: Vec<usize>,
}

impl TeacherCache {
    pub fn new(view: &TrainView<'_>, tau: f64, settings: &ObjectiveSettings) -> Result<Self> {
        let weighted = teacher_logits(view.features, view.text_embeddings, tau)?.logits;
        let reference_predictions = teacher_predictions(&weighted);
        let logits = if settings.mode == Mode::PrgPlainLogits {
            plain_zero_shot_logits(view.features, view.text_embeddings, tau)?
        } else {
            weighted
        };
        let nodes = nodes_from(view.features, &logits, settings, Side::Teacher)?.nodes;
        Ok(Self {
            soft_labels: soft_labels(&logits),
            predictions: teacher_predictions(&logits),
            logits,
            nodes,
            reference_predictions,
        })
    }

    pub fn batch(&self, indices: &[usize], proxy_t: &ProxyBank) -> Result<TeacherBatch> {
        let nodes = self.nodes.select_rows(indices)?;
        let edges = edge_matrix(
            &SampleNodeSet {
                nodes: nodes.clone(),
                side: Side::Teacher,
            },
            proxy_t,
        )?;
        Ok(TeacherBatch {
            logits: self.logits.select_rows(indices)?,
            soft_labels: self.soft_labels.select_rows(indices)?,
            nodes,
            edges,
            assignment: indices.iter().map(|&i| self.predictions[i]).collect(),
        })
    }
}

/// Tape handles for every term of one batch objective.
#[derive(Debug, Clone, Copy)]
pub struct BatchLossVars {
    pub ce: Var,
    pub node: Var,
    pub edge: Var,
    pub kd: Option<Var>,
    pub total: Var,
    pub student_logits: Var,
    pub student_features: Var,
    pub student_nodes: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLosses {
    pub ce: f64,
    pub node: f64,
    pub edge: f64,
    pub kd: f64,
    pub total: f64,
}

impl BatchLossVars {
    pub fn values(&self, tape: &Tape) -> BatchLosses {
        BatchLosses {
            ce: tape.value(self.ce).item(),
            node: tape.value(self.node).item(),
            edge: tape.value(self.edge).item(),
            kd: self.kd.map_or(0.0, |k| tape.value(k).item()),
            total: tape.value(self.total).item(),
        }
    }
}

/// Builds the full objective for one batch on `tape`.
///
/// Node and edge losses are always computed; they only enter `total` in the
/// graph modes. Teacher-side terms and proxies are constants.
pub fn batch_objective(
    tape: &mut Tape,
    params: &StudentParams,
    param_vars: &[Var],
    inputs: Var,
    teacher: &TeacherBatch,
    proxy_s: &ProxyBank,
    settings: &ObjectiveSettings,
) -> Result<BatchLossVars> {
    let out = params.forward_with(tape, param_vars, inputs)?;
    let student_nodes = nodes_on_tape(tape, out.f_ori, out.logits, settings)?;
    let teacher_nodes = tape.constant(teacher.nodes.clone());
    let teacher_edges = tape.constant(teacher.edges.clone());

    let ce = soft_cross_entropy_on_tape(tape, out.logits, &teacher.soft_labels)?;
    let student_edges = edge_matrix_on_tape(tape, student_nodes, proxy_s)?;
    let corr = node_cross_correlation_on_tape(tape, teacher_nodes, student_nodes)?;
    let reduction = settings.weights.reduction;
    let node = node_alignment_loss_on_tape(tape, corr, reduction)?;
    let edge = edge_alignment_loss_on_tape(tape, teacher_edges, student_edges, reduction)?;

    let mut kd = None;
    let total = match settings.mode {
        Mode::CeOnly => ce,
        Mode::KdBaseline => {
            let k =
                kd_baseline_loss_on_tape(tape, out.logits, &teacher.logits, settings.temperature)?;
            kd = Some(k);
            tape.add(ce, k)?
        }
        Mode::Prg | Mode::PrgPlainLogits | Mode::PrgFeatureNodes => {
            let wn = tape.scale(node, settings.weights.lambda_node);
            let we = tape.scale(edge, settings.weights.lambda_edge);
            let prg = tape.add(wn, we)?;
            tape.add(ce, prg)?
        }
    };
    Ok(BatchLossVars {
        ce,
        node,
        edge,
        kd,
        total,
        student_logits: out.logits,
        student_features: out.f_ori,
        student_nodes,
    })
}
