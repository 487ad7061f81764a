//! The `prg` command line: synth, train, eval, gradcheck, heatmap.
//!
//! Every command prints one JSON document on standard output and reports
//! failures on standard error. Exit codes: 0 success, 2 usage or validation
//! error, 3 numeric abort, 4 gradcheck failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bundle::{load_bundle, save_bundle, synth_bundle, Manifest, SynthParams};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::losses::{Reduction, DEFAULT_KD_TEMPERATURE, DEFAULT_LAMBDA_EDGE, DEFAULT_LAMBDA_NODE};
use crate::numerics::DEFAULT_STEP;
use crate::prompt_weighting::DEFAULT_TAU;
use crate::student::StudentConfig;
use crate::trainer::{
    evaluate, gradcheck_suite, heatmap_metrics, load_checkpoint, run_training, write_heatmap, Mode,
    SplitName, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_GRADCHECK: i32 = 4;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Largest accepted relative gradient error of `prg gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "prg",
    version,
    about = "Annotation-free distillation of a zero-shot teacher"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic teacher bundle.
    Synth(SynthArgs),
    /// Train a student from a bundle.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a bundle split.
    Eval(EvalArgs),
    /// Finite-difference check of every loss through the student.
    Gradcheck(GradcheckArgs),
    /// Inter-sample correlation heatmaps of teacher and student features.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    prompts: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    input_dim: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Bundle directory (overrides `bundle` in the config file).
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// JSON config with flat keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set lambda_node=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "eval")]
    split: SplitName,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// First instance seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    h: f64,
    #[arg(long, default_value_t = GRADCHECK_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Test hook: corrupt one analytic gradient entry before comparing.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flat run configuration: student widths, training hyperparameters, paths.
///
/// Missing keys take defaults; unknown keys are rejected. `init_seed`
/// defaults to `seed`; `alpha` defaults to `batch_size / n_train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,

    pub backbone_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub init_seed: Option<u64>,

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
    pub alpha: Option<f64>,
    pub tau: f64,
    pub temperature: f64,
    pub seed: u64,
    pub mode: Mode,
    pub standardize_nodes: bool,
    pub record_seconds: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            bundle: None,
            out: None,
            resume: None,
            backbone_hidden: vec![128],
            feature_dim: 64,
            init_seed: None,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            t0: t.t0,
            t_mult: t.t_mult,
            lambda_node: DEFAULT_LAMBDA_NODE,
            lambda_edge: DEFAULT_LAMBDA_EDGE,
            reduction: t.reduction,
            alpha: t.alpha,
            tau: DEFAULT_TAU,
            temperature: DEFAULT_KD_TEMPERATURE,
            seed: t.seed,
            mode: t.mode,
            standardize_nodes: t.standardize_nodes,
            record_seconds: t.record_seconds,
        }
    }
}

impl RunConfig {
    /// Parses a config object after applying `overrides` key by key.
    pub fn from_value(mut base: Value, overrides: &[(String, Value)]) -> Result<Self> {
        let obj = base
            .as_object_mut()
            .ok_or_else(|| Error::Validation("config must be a JSON object".into()))?;
        for (k, v) in overrides {
            obj.insert(k.clone(), v.clone());
        }
        serde_json::from_value(base).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            t0: self.t0,
            t_mult: self.t_mult,
            lambda_node: self.lambda_node,
            lambda_edge: self.lambda_edge,
            reduction: self.reduction,
            alpha: self.alpha,
            tau: self.tau,
            temperature: self.temperature,
            seed: self.seed,
            mode: self.mode,
            standardize_nodes: self.standardize_nodes,
            record_seconds: self.record_seconds,
        }
    }

    pub fn student_config(&self, manifest: &Manifest) -> StudentConfig {
        StudentConfig {
            input_dim: manifest.input_dim,
            backbone_hidden: self.backbone_hidden.clone(),
            feature_dim: self.feature_dim,
            n_classes: manifest.n_classes,
            teacher_dim: manifest.feature_dim,
            init_seed: self.init_seed.unwrap_or(self.seed),
        }
    }
}

/// Splits `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("--set expects KEY=VALUE, got {s:?}")))?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::Validation(format!("--set has an empty key: {s:?}")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((key.to_string(), value))
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Heatmap(a) => cmd_heatmap(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("serializing output: {e}")))?;
    println!("{text}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let params = SynthParams {
        classes: a.classes,
        prompts: a.prompts,
        dim: a.dim,
        input_dim: a.input_dim,
        per_class: a.per_class,
        noise: a.noise,
        seed: a.seed,
    };
    let bundle = synth_bundle(&params)?;
    save_bundle(&bundle, &a.out)?;
    print_json(bundle.manifest())?;
    Ok(EXIT_OK)
}

fn read_config(path: Option<&Path>) -> Result<Value> {
    match path {
        None => Ok(Value::Object(Map::new())),
        Some(p) => fsutil::read_json(p),
    }
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let base = read_config(a.config.as_deref())?;
    let mut overrides = Vec::new();
    let path_value = |p: &Path| Value::String(p.to_string_lossy().into_owned());
    if let Some(p) = &a.bundle {
        overrides.push(("bundle".to_string(), path_value(p)));
    }
    if let Some(p) = &a.out {
        overrides.push(("out".to_string(), path_value(p)));
    }
    if let Some(p) = &a.resume {
        overrides.push(("resume".to_string(), path_value(p)));
    }
    if let Some(m) = a.mode {
        overrides.push(("mode".to_string(), Value::String(m.as_str().to_string())));
    }
    if let Some(e) = a.epochs {
        overrides.push(("epochs".to_string(), e.into()));
    }
    if let Some(s) = a.seed {
        overrides.push(("seed".to_string(), s.into()));
    }
    for s in &a.overrides {
        overrides.push(parse_override(s)?);
    }
    let mut config = RunConfig::from_value(base, &overrides)?;

    let bundle_dir = config
        .bundle
        .clone()
        .ok_or_else(|| Error::Validation("no bundle given (--bundle or config key)".into()))?;
    let out = config.out.clone().ok_or_else(|| {
        Error::Validation("no output directory given (--out or config key)".into())
    })?;
    let bundle = load_bundle(&bundle_dir)?;

    let mut train_cfg = config.train_config();
    train_cfg.alpha = Some(train_cfg.resolve_alpha(bundle.manifest().split.train.len())?);
    train_cfg.validate()?;
    let student_cfg = config.student_config(bundle.manifest());
    student_cfg.validate()?;
    config.alpha = train_cfg.alpha;
    config.init_seed = Some(student_cfg.init_seed);

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    fsutil::write_json(&out.join(RESOLVED_CONFIG_FILE), &config)?;

    let (_, summary) = run_training(
        &bundle,
        &student_cfg,
        &train_cfg,
        &out,
        config.resume.as_deref(),
    )?;
    print_json(&summary)?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let bundle = load_bundle(&a.bundle)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let result = evaluate(&ckpt.state.params, &bundle, a.split, a.tau)?;
    print_json(&result)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct GradcheckOutput {
    h: f64,
    tolerance: f64,
    first_seed: u64,
    n_seeds: u64,
    losses: Vec<crate::trainer::GradcheckEntry>,
    passed: bool,
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if !(a.h > 0.0) || !(a.tolerance > 0.0) || a.seeds == 0 {
        return Err(Error::Validation(
            "gradcheck needs h > 0, tolerance > 0 and seeds >= 1".into(),
        ));
    }
    let losses = gradcheck_suite(a.seed, a.seeds, a.h, a.tau, a.inject_fault)?;
    let failed: Vec<_> = losses
        .iter()
        .filter(|e| !(e.max_rel_error < a.tolerance))
        .collect();
    for e in &failed {
        eprintln!(
            "gradcheck failed: {} max relative error {:e} (seed {}) >= {:e}",
            e.loss, e.max_rel_error, e.worst_seed, a.tolerance
        );
    }
    let passed = failed.is_empty();
    print_json(&GradcheckOutput {
        h: a.h,
        tolerance: a.tolerance,
        first_seed: a.seed,
        n_seeds: a.seeds,
        losses,
        passed,
    })?;
    Ok(if passed { EXIT_OK } else { EXIT_GRADCHECK })
}

fn cmd_heatmap(a: HeatmapArgs) -> Result<i32> {
    let bundle = load_bundle(&a.bundle)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let result = heatmap_metrics(&ckpt.state.params, &bundle, a.classes, a.per_class, a.seed)?;
    write_heatmap(&result, &a.out)?;
    print_json(&serde_json::json!({
        "classes": result.classes,
        "mean_offdiag_teacher": result.mean_offdiag_teacher,
        "mean_offdiag_student": result.mean_offdiag_student,
    }))?;
    Ok(EXIT_OK)
}
