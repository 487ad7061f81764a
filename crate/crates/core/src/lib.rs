//! Annotation-free knowledge distillation with proxy relational graphs.
//!
//! A frozen vision-language teacher is consumed through precomputed files
//! (a [`bundle::TeacherBundle`]). The student is trained from the teacher's
//! prompt-weighted soft labels plus two graph alignment terms: node alignment
//! (teacher/student sample cross-correlation driven to identity) and edge
//! alignment (sample-to-class-proxy correlation matrices matched between the
//! two sides).
//!
//! Module map:
//!
//! * [`numerics`] dense matrices, a reverse-mode tape, Pearson correlation
//!   and finite-difference gradient checks.
//! * [`bundle`] the on-disk teacher dataset plus a synthetic generator.
//! * [`prompt_weighting`] per-prompt logits, confidence weights, soft labels.
//! * [`graph`] sample nodes, class-proxy banks and edge matrices.
//! * [`losses`] every training objective.
//! * [`student`] the trainable feed-forward student.
//! * [`trainer`] optimizer, scheduler, training loop, evaluation, diagnostics.
//! * [`cli`] the `prg` command-line front end.

// Validation uses `!(x > 0.0)`-style checks on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod cli;
pub mod error;
mod fsutil;
pub mod graph;
pub mod losses;
pub mod numerics;
pub mod prompt_weighting;
pub mod student;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Matrix;
