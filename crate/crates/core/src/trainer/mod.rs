//! The annotation-free distillation loop.
//!
//! Per iteration: take the next shuffled batch, look up the precomputed
//! teacher targets, compute teacher edges against the current teacher
//! proxies, run the student, assemble the objective, take one AdamW step at
//! the epoch's learning rate, then move both proxy banks using the teacher's
//! class predictions.
//!
//! Ground-truth labels are never visible to the iteration code: it only sees a
//! [`TrainView`](crate::bundle::TrainView), and the bundle's label accessor is
//! audited while a training guard is held.

mod adamw;
mod checkpoint;
mod gradcheck;
mod heatmap;
mod objective;
mod run;
mod schedule;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::TeacherBundle;
use crate::error::{Error, Result};
use crate::graph::{check_alpha, init_proxy_bank, ProxyBank};
use crate::losses::{
    LossWeights, Reduction, DEFAULT_KD_TEMPERATURE, DEFAULT_LAMBDA_EDGE, DEFAULT_LAMBDA_NODE,
};
use crate::numerics::{Matrix, Tape};
use crate::prompt_weighting::{teacher_logits, teacher_predictions, DEFAULT_TAU};
use crate::student::{forward, init_student, StudentConfig, StudentParams};

pub use adamw::{adamw_step, AdamState, AdamWConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ResumeManifest};
pub use gradcheck::{gradcheck_suite, GradcheckEntry, GradcheckInstance, GradcheckShape, LossTerm};
pub use heatmap::{heatmap_metrics, write_heatmap, HeatmapResult};
pub use objective::{
    batch_objective, node_dim, BatchLossVars, BatchLosses, Mode, ObjectiveSettings, TeacherBatch,
    TeacherCache,
};
pub use run::{run_training, RunSummary};
pub use schedule::cosine_restart_lr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub t0: usize,
    pub t_mult: usize,
    pub lambda_node: f64,
    pub lambda_edge: f64,
    pub reduction: Reduction,
    /// Proxy update intensity; `None` resolves to `batch_size / n_train`.
    pub alpha: Option<f64>,
    pub tau: f64,
    pub temperature: f64,
    pub seed: u64,
    pub mode: Mode,
    pub standardize_nodes: bool,
    /// Write wall-clock seconds into metrics; off keeps metrics byte-reproducible.
    pub record_seconds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 150,
            lr_max: 0.03,
            lr_min: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            t0: 10,
            t_mult: 2,
            lambda_node: DEFAULT_LAMBDA_NODE,
            lambda_edge: DEFAULT_LAMBDA_EDGE,
            reduction: Reduction::Frobenius,
            alpha: None,
            tau: DEFAULT_TAU,
            temperature: DEFAULT_KD_TEMPERATURE,
            seed: 0,
            mode: Mode::Prg,
            standardize_nodes: false,
            record_seconds: false,
        }
    }
}

impl TrainConfig {
    pub fn resolve_alpha(&self, n_train: usize) -> Result<f64> {
        let alpha = match self.alpha {
            Some(a) => a,
            None if n_train == 0 => return Err(Error::Validation("train split is empty".into())),
            None => self.batch_size as f64 / n_train as f64,
        };
        check_alpha(alpha)?;
        Ok(alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Validation(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr_max > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_max {
            return Err(Error::Validation(format!(
                "need 0 <= lr_min <= lr_max, lr_max > 0 (got {}, {})",
                self.lr_min, self.lr_max
            )));
        }
        if self.t0 == 0 || self.t_mult == 0 {
            return Err(Error::Validation("t0 and t_mult must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::Validation(
                "need beta1, beta2 in [0, 1) and adam_eps > 0".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Validation("weight_decay must be >= 0".into()));
        }
        if !(self.tau > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Validation("tau and temperature must be > 0".into()));
        }
        if let Some(a) = self.alpha {
            check_alpha(a)?;
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_node: self.lambda_node,
            lambda_edge: self.lambda_edge,
            reduction: self.reduction,
        }
    }

    pub fn objective(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            mode: self.mode,
            weights: self.loss_weights(),
            temperature: self.temperature,
            standardize_nodes: self.standardize_nodes,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_restart_lr(epoch as f64, self.lr_max, self.lr_min, self.t0, self.t_mult)
    }

    pub fn teacher_proxy_seed(&self) -> u64 {
        self.seed.wrapping_mul(2).wrapping_add(1)
    }

    pub fn student_proxy_seed(&self) -> u64 {
        self.seed.wrapping_mul(2).wrapping_add(2)
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_node: f64,
    pub loss_edge: f64,
    pub loss_total: f64,
    pub teacher_agreement: f64,
    pub label_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Record with the highest eval teacher agreement; earliest wins ties.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.teacher_agreement >= r.teacher_agreement => Some(b),
                _ => Some(r),
            })
    }
}

/// Everything the loop observed for one iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub batch: Vec<usize>,
    pub losses: BatchLosses,
    /// Student nodes from the forward pass, as used for the proxy update.
    pub student_nodes: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub teacher_agreement: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_accuracy: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Eval,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "eval" => Ok(SplitName::Eval),
            _ => Err(Error::Validation(format!("unknown split {s:?}"))),
        }
    }
}

fn split_indices(bundle: &TeacherBundle, split: SplitName) -> &[usize] {
    match split {
        SplitName::Train => &bundle.manifest().split.train,
        SplitName::Eval => &bundle.manifest().split.eval,
    }
}

/// Agreement with the prompt-weighted teacher, plus label accuracy when the
/// bundle carries labels.
pub fn evaluate(
    params: &StudentParams,
    bundle: &TeacherBundle,
    split: SplitName,
    tau: f64,
) -> Result<EvalResult> {
    let indices = split_indices(bundle, split);
    if indices.is_empty() {
        return Err(Error::Validation(format!("{split:?} split is empty")));
    }
    let features = bundle.features().select_rows(indices)?;
    let teacher =
        teacher_predictions(&teacher_logits(&features, bundle.text_embeddings(), tau)?.logits);
    evaluate_against(params, bundle, indices, &teacher)
}

fn evaluate_against(
    params: &StudentParams,
    bundle: &TeacherBundle,
    indices: &[usize],
    teacher: &[usize],
) -> Result<EvalResult> {
    let x = bundle.inputs().select_rows(indices)?;
    let (_, _, logits) = forward(params, &x)?;
    let preds = logits.argmax_rows();
    let n = indices.len();
    let agree = preds.iter().zip(teacher).filter(|(a, b)| a == b).count();
    let label_accuracy = bundle.labels().map(|labels| {
        let hits = preds
            .iter()
            .zip(indices)
            .filter(|(p, &i)| **p == labels[i])
            .count();
        hits as f64 / n as f64
    });
    Ok(EvalResult {
        teacher_agreement: agree as f64 / n as f64,
        label_accuracy,
        n,
    })
}

/// Mutable training state: what a checkpoint captures.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: StudentParams,
    pub adam: AdamState,
    pub proxy_t: ProxyBank,
    pub proxy_s: ProxyBank,
    pub epochs_completed: usize,
    pub iteration: u64,
}

pub struct Trainer<'a> {
    bundle: &'a TeacherBundle,
    cfg: TrainConfig,
    teacher: TeacherCache,
    state: TrainState,
}

fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mix = (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ mix);
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    order
}

impl<'a> Trainer<'a> {
    pub fn new(
        bundle: &'a TeacherBundle,
        student_cfg: &StudentConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = bundle.manifest();
        if student_cfg.input_dim != m.input_dim
            || student_cfg.n_classes != m.n_classes
            || student_cfg.teacher_dim != m.feature_dim
        {
            return Err(Error::Validation(format!(
                "student config (m={}, c={}, d={}) does not match bundle (m={}, c={}, d={})",
                student_cfg.input_dim,
                student_cfg.n_classes,
                student_cfg.teacher_dim,
                m.input_dim,
                m.n_classes,
                m.feature_dim
            )));
        }
        let params = init_student(student_cfg)?;
        let alpha = cfg.resolve_alpha(m.split.train.len())?;
        let dim = node_dim(cfg.mode, m.feature_dim, m.n_classes);
        let state = TrainState {
            adam: AdamState::new(&params),
            params,
            proxy_t: init_proxy_bank(m.n_classes, dim, alpha, cfg.teacher_proxy_seed())?,
            proxy_s: init_proxy_bank(m.n_classes, dim, alpha, cfg.student_proxy_seed())?,
            epochs_completed: 0,
            iteration: 0,
        };
        Self::from_state(bundle, cfg, state)
    }

    pub fn from_state(
        bundle: &'a TeacherBundle,
        cfg: &TrainConfig,
        state: TrainState,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = bundle.manifest();
        if m.split.train.len() < cfg.batch_size {
            return Err(Error::Validation(format!(
                "train split has {} samples, fewer than batch_size {}",
                m.split.train.len(),
                cfg.batch_size
            )));
        }
        let dim = node_dim(cfg.mode, m.feature_dim, m.n_classes);
        for bank in [&state.proxy_t, &state.proxy_s] {
            if bank.proxies.shape() != (m.n_classes, dim) {
                return Err(Error::Validation(format!(
                    "proxy bank is {:?}, mode {} needs {}x{}",
                    bank.proxies.shape(),
                    cfg.mode,
                    m.n_classes,
                    dim
                )));
            }
        }
        let teacher = TeacherCache::new(&bundle.train_view(), cfg.tau, &cfg.objective())?;
        Ok(Self {
            bundle,
            cfg: cfg.clone(),
            teacher,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn teacher(&self) -> &TeacherCache {
        &self.teacher
    }

    pub fn is_finished(&self) -> bool {
        self.state.epochs_completed >= self.cfg.epochs
    }

    /// Runs the next epoch and evaluates on the eval split.
    pub fn run_epoch(&mut self, observer: &mut dyn FnMut(&IterationRecord)) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.state.epochs_completed;
        let lr = self.cfg.lr_at(epoch);
        let sums = {
            let _guard = self.bundle.enter_training();
            self.train_iterations(epoch, lr, observer)?
        };
        let n_iter = sums.0.max(1) as f64;
        let eval = self.evaluate_split(SplitName::Eval)?;
        self.state.epochs_completed += 1;
        Ok(EpochRecord {
            epoch,
            lr,
            loss_ce: sums.1.ce / n_iter,
            loss_node: sums.1.node / n_iter,
            loss_edge: sums.1.edge / n_iter,
            loss_total: sums.1.total / n_iter,
            teacher_agreement: eval.teacher_agreement,
            label_accuracy: eval.label_accuracy,
            seconds: if self.cfg.record_seconds {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }

    fn train_iterations(
        &mut self,
        epoch: usize,
        lr: f64,
        observer: &mut dyn FnMut(&IterationRecord),
    ) -> Result<(usize, BatchLosses)> {
        let view = self.bundle.train_view();
        let order = epoch_order(&view.manifest.split.train, self.cfg.seed, epoch);
        let settings = self.cfg.objective();
        let adam_cfg = self.cfg.adamw();
        let mut sums = BatchLosses {
            ce: 0.0,
            node: 0.0,
            edge: 0.0,
            kd: 0.0,
            total: 0.0,
        };
        let mut count = 0;

        for batch in order.chunks_exact(self.cfg.batch_size) {
            let st = &mut self.state;
            let teacher = self.teacher.batch(batch, &st.proxy_t)?;

            let mut tape = Tape::new();
            let vars = st.params.register(&mut tape);
            let x = tape.constant(view.inputs.select_rows(batch)?);
            let lv = batch_objective(
                &mut tape,
                &st.params,
                &vars,
                x,
                &teacher,
                &st.proxy_s,
                &settings,
            )?;
            let losses = lv.values(&tape);
            let finite = [losses.ce, losses.node, losses.edge, losses.kd, losses.total]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iteration: st.iteration,
                    detail: format!("{losses:?}"),
                });
            }
            let student_nodes = tape.value(lv.student_nodes).clone();
            let grads = tape.backward(lv.total)?;
            let grads = st.params.gradients(&grads, &vars);
            adamw_step(&mut st.params, &grads, &mut st.adam, lr, &adam_cfg)?;
            if !st.params.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    iteration: st.iteration,
                    detail: "parameters became non-finite after the optimizer step".into(),
                });
            }

            st.proxy_t.update(&teacher.nodes, &teacher.assignment)?;
            st.proxy_s.update(&student_nodes, &teacher.assignment)?;

            observer(&IterationRecord {
                epoch,
                iteration: st.iteration,
                batch: batch.to_vec(),
                losses,
                student_nodes,
            });
            st.iteration += 1;
            count += 1;
            sums.ce += losses.ce;
            sums.node += losses.node;
            sums.edge += losses.edge;
            sums.kd += losses.kd;
            sums.total += losses.total;
        }
        Ok((count, sums))
    }

    pub fn evaluate_split(&self, split: SplitName) -> Result<EvalResult> {
        let indices = split_indices(self.bundle, split);
        if indices.is_empty() {
            return Err(Error::Validation(format!("{split:?} split is empty")));
        }
        let teacher: Vec<usize> = indices
            .iter()
            .map(|&i| self.teacher.reference_predictions[i])
            .collect();
        evaluate_against(&self.state.params, self.bundle, indices, &teacher)
    }
}

/// Trains for `cfg.epochs` epochs from a fresh initialization.
pub fn train(
    bundle: &TeacherBundle,
    student_cfg: &StudentConfig,
    cfg: &TrainConfig,
) -> Result<(StudentParams, TrainHistory)> {
    let (state, history) = train_observed(bundle, student_cfg, cfg, &mut |_| {})?;
    Ok((state.params, history))
}

/// [`train`] with a per-iteration observer; returns the final state.
pub fn train_observed(
    bundle: &TeacherBundle,
    student_cfg: &StudentConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<(TrainState, TrainHistory)> {
    let mut trainer = Trainer::new(bundle, student_cfg, cfg)?;
    let mut history = TrainHistory::default();
    while !trainer.is_finished() {
        history.records.push(trainer.run_epoch(observer)?);
    }
    Ok((trainer.into_state(), history))
}
