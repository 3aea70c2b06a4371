//! Command-line front end.
//!
//! Results go to stdout as JSON, logs to stderr. Exit codes: 0 success,
//! 2 invalid input, 3 I/O failure, 4 failed numerical verification.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::thread;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::analysis::{
    self, condition_number, evaluate_loss, mean_violations, svd_entropy, AnalysisError,
    ExperimentReport, Matrix, SweepConfig,
};
use crate::merger::{verify_identity, IdentityReport, MergeError, MergePlan, MergedCheckpoint, OnlineMerger};
use crate::scalar::Real;
use crate::schedule::{discretize_curve, CurveFamily, CurveSpec, ScheduleError, ScheduleKind};
use crate::tensorstore::{read_archive, Store, StoreError, TensorMap, TrajectoryManifest, STORE_ENV};
use crate::trainer::{
    hybrid_run, run_pipeline, HybridConfig, OptimizerConfig, OptimizerKind, PipelineConfig,
    ProblemConfig, ProblemKind, TrainError,
};
use crate::weights::{decay_to_merge, strategy_weights, MergeWeights, Strategy, WeightError};

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_VERIFICATION: u8 = 4;

/// Written by `run` under the store root.
pub const MERGED_FILE: &str = "merged.wsmt";
pub const VERIFY_FILE: &str = "verify.json";
pub const ANALYSIS_FILE: &str = "analysis.json";

const ENTROPY_NORMALIZATION: &str =
    "p_i = s_i^2 / sum_j s_j^2; entropy = -sum p_i ln p_i / ln(min(rows, cols))";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Verification(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
            CliError::Verification(_) => EXIT_VERIFICATION,
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }

    fn classify(io: bool, message: String) -> Self {
        if io {
            CliError::Io(message)
        } else {
            CliError::Validation(message)
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::classify(e.is_io(), e.to_string())
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        CliError::classify(e.is_io(), e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::classify(e.is_io(), e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        CliError::classify(e.is_io(), e.to_string())
    }
}

impl From<WeightError> for CliError {
    fn from(e: WeightError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        CliError::Validation(e.to_string())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Stage {
        stage: name,
        source: Box::new(e),
    })
}

#[derive(Debug, Parser)]
#[command(name = "wsm", version, about = "Emulate learning-rate decay by merging checkpoints")]
pub struct Cli {
    /// Store directory holding archives and trajectory.json.
    #[arg(long, global = true, env = STORE_ENV)]
    pub store: Option<PathBuf>,
    /// Worker threads for merging and sweeps.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print the plan and exit without touching the filesystem.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Seed for all randomness; overrides config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge weights equivalent to a decay curve.
    Derive(DeriveArgs),
    /// Merge checkpoint archives into one.
    Merge(MergeArgs),
    /// Check a merge against the reweighted recorded updates.
    Verify(VerifyArgs),
    /// Train a toy problem into the store.
    Train(TrainArgs),
    /// Run a merge sweep and write a CSV report.
    Sweep(SweepArgs),
    /// Decay-then-merge or merge-then-decay comparison.
    Hybrid(HybridArgs),
    /// Spectral and load-balance diagnostics for an archive.
    Analyze(AnalyzeArgs),
    /// Train, merge online, verify and analyze in one go.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    /// Curve spec as JSON, e.g. '{"family":"cosine","steps":4}'.
    #[arg(long)]
    pub curve: String,
    /// Number of decay steps; overrides the spec's `steps`.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Archives oldest first. Defaults to the last checkpoints in the store.
    pub inputs: Vec<PathBuf>,
    /// Same as the positional inputs.
    #[arg(long = "inputs", num_args = 1.., value_name = "ARCHIVE")]
    pub input_list: Vec<PathBuf>,
    /// Number of store checkpoints to merge when no inputs are given.
    #[arg(long)]
    pub last: Option<usize>,
    /// mean, ema:BETA, emulate:FAMILY[@END] or emulate:{JSON}.
    #[arg(long, default_value = "mean", conflicts_with = "weights")]
    pub strategy: String,
    /// Explicit merge weights as a JSON array, oldest first.
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Elements per streamed chunk.
    #[arg(long)]
    pub chunk: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Store holding the trajectory; defaults to --store.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    #[arg(long, default_value = "mean", conflicts_with = "weights")]
    pub strategy: String,
    #[arg(long)]
    pub weights: Option<String>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Everything a training run needs; the `--config` file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub problem: ProblemConfig,
    pub optimizer: OptimizerConfig,
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub dtype: Precision,
    #[serde(default)]
    pub eval_seed: u64,
}

impl TrainConfig {
    /// Noisy 64-dimensional quadratic, plain SGD, 64 checkpoints.
    pub fn toy() -> Self {
        let problem = ProblemConfig::quadratic(64, 1.0);
        let optimizer = OptimizerConfig::sgd();
        let pipeline = PipelineConfig::toy(&problem, &optimizer);
        TrainConfig {
            problem,
            optimizer,
            pipeline,
            dtype: Precision::F64,
            eval_seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with problem, optimizer and pipeline sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// quadratic, linear, logistic or mlp.
    #[arg(long)]
    pub problem: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// sgd, momentum or adaptive.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// wsm, wsd or cosine.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub cpt_every: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    /// wsd: first decaying step (default: last fifth of training).
    #[arg(long)]
    pub decay_start: Option<u64>,
    /// wsd: curve family name or CurveSpec JSON (default one_minus_sqrt).
    #[arg(long)]
    pub decay_curve: Option<String>,
    #[arg(long)]
    pub switch_step: Option<u64>,
    #[arg(long)]
    pub record_updates: bool,
    #[arg(long, conflicts_with = "record_updates")]
    pub no_record_updates: bool,
    #[arg(long, value_enum)]
    pub dtype: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HybridArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Also write the report rows as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Cond,
    Svdent,
    Violations,
    Loss,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "cond,svdent")]
    pub metrics: Vec<Metric>,
    /// Output is always JSON; accepted for scripts that pass it.
    #[arg(long)]
    pub json: bool,
    /// Per-layer expert loads as a JSON array of arrays.
    #[arg(long)]
    pub loads: Option<String>,
    /// Problem the checkpoint belongs to, for the loss metric.
    #[arg(long)]
    pub problem: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TrainConfig JSON; the default is the toy quadratic.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args` (program name first), runs, and prints to stdout.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("WSM_LOG")
        .try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the worker pool: {e}");
        }
    }
    match execute(&cli) {
        Ok(value) => {
            let mut out = io::stdout().lock();
            let text = serde_json::to_string_pretty(&value).expect("JSON values serialize");
            if writeln!(out, "{text}").is_err() {
                return ExitCode::from(EXIT_IO);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Runs the parsed command and returns what goes to stdout.
pub fn execute(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Derive(a) => derive(a),
        Command::Merge(a) => merge(cli, a),
        Command::Verify(a) => verify(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Hybrid(a) => hybrid(cli, a),
        Command::Analyze(a) => analyze(cli, a),
        Command::Run(a) => run(cli, a),
    }
}

fn report_seed(seed: u64) {
    eprintln!("seed: {seed}");
}

fn store_root(cli: &Cli) -> Result<PathBuf> {
    Store::resolve_root(cli.store.as_deref()).ok_or_else(|| {
        CliError::Validation(format!("no store given; pass --store or set {STORE_ENV}"))
    })
}

/// Opens the store, creating it, and checks that it accepts writes.
fn writable_store(root: &Path) -> Result<Store> {
    let store = Store::open(root)?;
    let probe = root.join(".wsm-write-probe");
    fs::write(&probe, b"").map_err(|e| CliError::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| CliError::io(&probe, e))?;
    Ok(store)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn parse_weights(text: &str) -> Result<MergeWeights<f64>> {
    let c: Vec<f64> = serde_json::from_str(text)
        .map_err(|e| CliError::Validation(format!("--weights: {e}")))?;
    Ok(MergeWeights::explicit(c)?)
}

fn parse_strategy(text: &str) -> Result<Strategy> {
    Ok(text.parse::<Strategy>()?)
}

fn derive(a: &DeriveArgs) -> Result<Value> {
    let mut spec: CurveSpec = serde_json::from_str(&a.curve)
        .map_err(|e| CliError::Validation(format!("--curve: {e}")))?;
    if let Some(k) = a.k {
        spec.steps = k;
    }
    let schedule = discretize_curve::<f64>(&spec)?;
    let weights = decay_to_merge(&schedule);
    Ok(json!({ "w": schedule.w(), "c": weights.c() }))
}

fn merge(cli: &Cli, a: &MergeArgs) -> Result<Value> {
    let listed: Vec<PathBuf> = a.inputs.iter().chain(&a.input_list).cloned().collect();
    let inputs: Vec<PathBuf> = if listed.is_empty() {
        let n = a
            .last
            .ok_or_else(|| CliError::Validation("give input archives or --last N".into()))?;
        let store = Store::open_existing(&store_root(cli)?)?;
        let manifest = store.load_manifest()?;
        let window = manifest.last_n(n)?;
        if window.shortfall {
            return Err(CliError::Validation(format!(
                "store holds {} checkpoints, --last asks for {n}",
                window.entries.len()
            )));
        }
        window.entries.iter().map(|e| store.resolve(&e.path)).collect()
    } else {
        listed
    };
    let weights = match &a.weights {
        Some(text) => parse_weights(text)?,
        None => strategy_weights(&parse_strategy(&a.strategy)?, inputs.len().saturating_sub(1))?,
    };
    if a.out.exists() {
        return Err(CliError::Io(format!(
            "{} already exists; archives are never overwritten",
            a.out.display()
        )));
    }
    let mut plan = MergePlan::open(&inputs, weights, "merge")?;
    if let Some(chunk) = a.chunk {
        if chunk == 0 {
            return Err(CliError::Validation("--chunk must be positive".into()));
        }
        plan = plan.with_chunk(chunk);
    }
    let steps: Vec<u64> = plan.inputs().iter().map(|i| i.metadata().step).collect();
    let summary = json!({
        "inputs": inputs,
        "steps": steps,
        "c": plan.weights().c(),
        "out": a.out,
    });
    if cli.dry_run {
        return Ok(json!({ "plan": summary }));
    }
    plan.execute(&a.out)?;
    info!("merged {} archives into {}", inputs.len(), a.out.display());
    Ok(summary)
}

fn verify(cli: &Cli, a: &VerifyArgs) -> Result<Value> {
    let weights = match &a.weights {
        Some(text) => parse_weights(text)?,
        None => {
            if a.window == 0 {
                return Err(CliError::Validation("--window must be at least 1".into()));
            }
            strategy_weights(&parse_strategy(&a.strategy)?, a.window - 1)?
        }
    };
    let root = match &a.trajectory {
        Some(dir) => dir.clone(),
        None => store_root(cli)?,
    };
    let store = Store::open_existing(&root)?;
    let manifest = store.load_manifest()?;
    if cli.dry_run {
        let window = manifest.last_n(weights.len())?;
        return Ok(json!({
            "plan": {
                "steps": window.entries.iter().map(|e| e.step).collect::<Vec<_>>(),
                "c": weights.c(),
            }
        }));
    }
    let report = verify_identity(&store, &manifest, &weights)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    check_report(&report)?;
    Ok(serde_json::to_value(report).expect("report serializes"))
}

fn check_report(report: &IdentityReport) -> Result<()> {
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "max relative error {:e} exceeds {:e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn parse_curve(text: &str) -> Result<CurveSpec> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("--decay-curve: {e}")))
    } else {
        let family: CurveFamily = text.parse()?;
        Ok(CurveSpec::new(family, 1, 0.0))
    }
}

/// The config file (or the toy default) with command-line overrides applied.
pub fn train_config(cli: &Cli, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => read_json::<TrainConfig>(path)?,
        None => TrainConfig::toy(),
    };
    let mut retune = false;
    if let Some(kind) = &a.problem {
        let kind: ProblemKind = kind.parse()?;
        let dim = cfg.problem.dim;
        cfg.problem = ProblemConfig {
            dim,
            ..ProblemConfig::new(kind)
        };
        retune = true;
    }
    if let Some(dim) = a.dim {
        cfg.problem.dim = dim;
    }
    if let Some(noise) = a.noise {
        cfg.problem.noise_scale = noise;
    }
    if let Some(kind) = &a.optimizer {
        let kind: OptimizerKind = kind.parse()?;
        cfg.optimizer = OptimizerConfig::of_kind(kind);
        retune = true;
    }
    let p = &mut cfg.pipeline;
    if retune {
        p.lr.lr_peak = cfg.optimizer.default_lr(cfg.problem.default_lr());
    }
    if let Some(s) = &a.schedule {
        p.schedule = s.parse()?;
    }
    if let Some(steps) = a.steps {
        p.total_steps = steps;
    }
    if let Some(k) = a.cpt_every {
        p.checkpoint_every = k;
    }
    if let Some(lr) = a.lr {
        p.lr.lr_peak = lr;
    }
    if let Some(w) = a.warmup {
        p.lr.warmup_steps = w;
    }
    if let Some(s) = a.switch_step {
        p.switch_step = Some(s);
    }
    if a.record_updates {
        p.record_updates = true;
    }
    if a.no_record_updates {
        p.record_updates = false;
    }
    if let Some(d) = a.dtype {
        cfg.dtype = d;
    }
    if let Some(seed) = cli.seed {
        p.seed = seed;
    }
    match p.schedule {
        ScheduleKind::Wsd => {
            p.lr.max_steps = Some(p.total_steps);
            if let Some(s) = a.decay_start {
                p.lr.decay_start = Some(s);
            }
            if p.lr.decay_start.is_none() {
                p.lr.decay_start = Some(p.total_steps - p.total_steps / 5);
            }
            if let Some(c) = &a.decay_curve {
                p.lr.decay_curve = Some(parse_curve(c)?);
            }
            if p.lr.decay_curve.is_none() {
                p.lr.decay_curve = Some(CurveSpec::new(CurveFamily::OneMinusSqrt, 1, 0.0));
            }
        }
        ScheduleKind::Cosine => p.lr.max_steps = Some(p.total_steps),
        ScheduleKind::Wsm => {}
    }
    cfg.problem.validate()?;
    cfg.optimizer.validate()?;
    cfg.pipeline.validate()?;
    Ok(cfg)
}

fn train_plan(cfg: &TrainConfig, root: &Path) -> Value {
    let p = &cfg.pipeline;
    json!({
        "store": root,
        "seed": p.seed,
        "checkpoints": p.checkpoint_count(),
        "first_step": p.checkpoint_every,
        "last_step": p.checkpoint_count() * p.checkpoint_every,
        "config": cfg,
    })
}

fn train_into(cfg: &TrainConfig, store: &Store, notify: Option<mpsc::Sender<PathBuf>>) -> Result<Value> {
    let manifest = match cfg.dtype {
        Precision::F64 => run_pipeline::<f64>(&cfg.problem, &cfg.optimizer, &cfg.pipeline, store, notify)?,
        Precision::F32 => run_pipeline::<f32>(&cfg.problem, &cfg.optimizer, &cfg.pipeline, store, notify)?,
    };
    Ok(json!({
        "checkpoints": manifest.entries.len(),
        "steps": manifest.entries.iter().map(|e| e.step).collect::<Vec<_>>(),
        "records_updates": manifest.records_updates,
        "manifest": store.manifest_path(),
    }))
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<Value> {
    let cfg = train_config(cli, a)?;
    let root = store_root(cli)?;
    report_seed(cfg.pipeline.seed);
    if cli.dry_run {
        return Ok(json!({ "plan": train_plan(&cfg, &root) }));
    }
    let store = writable_store(&root)?;
    train_into(&cfg, &store, None)
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<Value> {
    let mut cfg: SweepConfig = read_json(&a.config)?;
    if let Some(seed) = cli.seed {
        cfg.eval_seed = seed;
    }
    eprintln!("seeds: {:?}", cfg.seeds);
    report_seed(cfg.eval_seed);
    cfg.validate()?;
    if cli.dry_run {
        let cells: Vec<Value> = cfg
            .cells()
            .into_iter()
            .map(|(interval, windows)| json!({ "interval": interval, "windows": windows }))
            .collect();
        return Ok(json!({ "plan": { "cells": cells, "seeds": cfg.seeds, "out": a.out } }));
    }
    let report = analysis::sweep(&cfg)?;
    report.save_csv(&a.out)?;
    Ok(json!({ "rows": report.len(), "out": a.out, "summary": report.summarize() }))
}

fn hybrid(cli: &Cli, a: &HybridArgs) -> Result<Value> {
    let mut cfg: HybridConfig = read_json(&a.config)?;
    if let Some(seed) = cli.seed {
        cfg.pipeline.seed = seed;
    }
    report_seed(cfg.pipeline.seed);
    if cli.dry_run {
        return Ok(json!({ "plan": cfg }));
    }
    let outcome = hybrid_run::<f64>(&cfg)?;
    if let Some(out) = &a.out {
        let mut report = ExperimentReport::new();
        report.extend(outcome.rows.iter().cloned());
        report.save_csv(out)?;
    }
    Ok(serde_json::to_value(outcome).expect("outcome serializes"))
}

/// Condition number and entropy of every tensor with at least two axes,
/// viewed as `shape[0] x rest`.
fn spectral_report(tensors: &TensorMap, cond: bool, entropy: bool) -> Result<Value> {
    let mut out = serde_json::Map::new();
    for (name, tensor) in tensors {
        let shape = tensor.shape();
        if shape.len() < 2 {
            continue;
        }
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        let m = Matrix::new(rows, cols, tensor.to_f64_vec())?;
        let mut entry = serde_json::Map::new();
        entry.insert("shape".into(), json!(shape));
        if cond {
            match condition_number(&m) {
                Ok(k) if k.is_finite() => {
                    entry.insert("condition_number".into(), json!(k));
                }
                Ok(_) => {
                    entry.insert("condition_number".into(), Value::Null);
                    entry.insert("rank_deficient".into(), json!(true));
                }
                Err(e) => {
                    entry.insert("condition_number_error".into(), json!(e.to_string()));
                }
            }
        }
        if entropy {
            match svd_entropy(&m) {
                Ok(h) => entry.insert("svd_entropy".into(), json!(h)),
                Err(e) => entry.insert("svd_entropy_error".into(), json!(e.to_string())),
            };
        }
        out.insert(name.clone(), Value::Object(entry));
    }
    Ok(Value::Object(out))
}

/// Load vectors: `--loads` plus archive tensors whose name ends in `loads`.
fn collect_loads(archive_tensors: &TensorMap, extra: Option<&str>) -> Result<Vec<Vec<f64>>> {
    let mut layers: Vec<Vec<f64>> = match extra {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| CliError::Validation(format!("--loads: {e}")))?,
        None => Vec::new(),
    };
    for (name, tensor) in archive_tensors {
        if !name.ends_with("loads") {
            continue;
        }
        let values = tensor.to_f64_vec();
        let width = *tensor.shape().last().unwrap_or(&values.len());
        layers.extend(values.chunks(width.max(1)).map(<[f64]>::to_vec));
    }
    Ok(layers)
}

fn analyze(cli: &Cli, a: &AnalyzeArgs) -> Result<Value> {
    let archive = read_archive(&a.checkpoint)?;
    if cli.dry_run {
        return Ok(json!({ "plan": { "checkpoint": a.checkpoint, "metrics": format!("{:?}", a.metrics) } }));
    }
    let tensors = archive.read_all()?;
    let want = |m: Metric| a.metrics.contains(&m);
    let mut out = json!({
        "checkpoint": a.checkpoint,
        "step": archive.metadata().step,
        "metadata": { "svd_entropy_normalization": ENTROPY_NORMALIZATION },
    });
    if want(Metric::Cond) || want(Metric::Svdent) {
        out["tensors"] = spectral_report(&tensors, want(Metric::Cond), want(Metric::Svdent))?;
    }
    if want(Metric::Violations) {
        let layers = collect_loads(&tensors, a.loads.as_deref())?;
        if layers.is_empty() {
            return Err(CliError::Validation(
                "violations need --loads or tensors named *loads".into(),
            ));
        }
        out["violations"] = json!({
            "per_layer": layers
                .iter()
                .map(|l| analysis::load_violations(l))
                .collect::<Result<Vec<_>, _>>()?,
            "global": mean_violations(&layers)?,
        });
    }
    if want(Metric::Loss) {
        let kind: ProblemKind = a
            .problem
            .as_deref()
            .ok_or_else(|| CliError::Validation("the loss metric needs --problem".into()))?
            .parse()?;
        let mut problem = ProblemConfig::new(kind);
        if let Some(dim) = a.dim {
            problem.dim = dim;
        }
        let seed = a.eval_seed.or(cli.seed).unwrap_or(0);
        report_seed(seed);
        out["loss"] = json!(evaluate_loss(&archive, &problem, seed)?);
    }
    Ok(out)
}

/// Summary of an end-to-end run; also what `run` prints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub seed: u64,
    pub checkpoints: usize,
    pub merged: Option<String>,
    pub verify: IdentityReport,
    pub analysis: Value,
}

/// Trains into `root`, merging online in a second thread, then verifies the
/// final window and analyzes the merged checkpoint.
pub fn end_to_end(cfg: &TrainConfig, root: &Path) -> Result<EndToEndReport> {
    let store = stage("train", writable_store(root))?;
    if !stage("train", store.load_manifest().map_err(CliError::from))?.entries.is_empty() {
        return Err(CliError::Stage {
            stage: "train",
            source: Box::new(CliError::Io(format!(
                "{} already holds a trajectory",
                root.display()
            ))),
        });
    }
    let p = &cfg.pipeline;
    let mut merger = stage("merge", OnlineMerger::new(p.window, p.strategy.clone()).map_err(CliError::from))?;
    let (tx, rx) = mpsc::channel::<PathBuf>();
    let online = thread::spawn(move || -> Result<Option<MergedCheckpoint>, MergeError> {
        let mut latest = None;
        for path in rx {
            if let Some(m) = merger.online_step(&path)? {
                latest = Some(m);
            }
        }
        Ok(latest)
    });
    let trained = train_into(cfg, &store, Some(tx));
    let merged = online.join().expect("merger thread does not panic");
    let trained = stage("train", trained)?;
    let merged = stage("merge", merged.map_err(CliError::from))?;
    let checkpoints = trained["checkpoints"].as_u64().unwrap_or(0) as usize;

    let merged_rel = match &merged {
        Some(m) => {
            stage("merge", m.write(store.resolve(MERGED_FILE)).map_err(CliError::from))?;
            Some(MERGED_FILE.to_string())
        }
        None => {
            warn!("only {checkpoints} checkpoints; window {} never filled", p.window);
            None
        }
    };

    let manifest = stage("verify", store.load_manifest().map_err(CliError::from))?;
    let weights = stage("verify", strategy_weights::<f64>(&p.strategy, p.window - 1).map_err(CliError::from))?;
    let report = stage("verify", verify_identity(&store, &manifest, &weights).map_err(CliError::from))?;
    stage("verify", write_json(&store.resolve(VERIFY_FILE), &report))?;

    let analysis = stage("analyze", analyze_run(cfg, &store, &manifest, merged.as_ref()))?;
    stage("analyze", write_json(&store.resolve(ANALYSIS_FILE), &analysis))?;

    let out = EndToEndReport {
        seed: p.seed,
        checkpoints,
        merged: merged_rel,
        verify: report,
        analysis,
    };
    stage("verify", check_report(&out.verify))?;
    Ok(out)
}

fn loss_of<T: Real>(cfg: &TrainConfig, tensors: &TensorMap) -> Result<f64> {
    let objective = cfg.problem.build::<T>()?;
    let theta: Vec<T> = objective.layout().from_tensors(tensors)?;
    Ok(objective
        .eval_loss(&theta, cfg.problem.data_source, cfg.eval_seed)
        .approx_f64())
}

fn analyze_run(
    cfg: &TrainConfig,
    store: &Store,
    manifest: &TrajectoryManifest,
    merged: Option<&MergedCheckpoint>,
) -> Result<Value> {
    let last = manifest
        .entries
        .last()
        .ok_or_else(|| CliError::Validation("trajectory is empty".into()))?;
    let raw = store.open_entry(last)?.read_all()?;
    let loss = |t: &TensorMap| match cfg.dtype {
        Precision::F64 => loss_of::<f64>(cfg, t),
        Precision::F32 => loss_of::<f32>(cfg, t),
    };
    let mut out = json!({
        "raw_step": last.step,
        "raw_loss": loss(&raw)?,
        "window": cfg.pipeline.window,
        "strategy": cfg.pipeline.strategy.label(),
        "eval_seed": cfg.eval_seed,
        "metadata": { "svd_entropy_normalization": ENTROPY_NORMALIZATION },
    });
    if let Some(m) = merged {
        out["merged_loss"] = json!(loss(&m.tensors)?);
        out["merged_tensors"] = spectral_report(&m.tensors, true, true)?;
    }
    if let Some(switch) = cfg.pipeline.switch_step {
        let window = manifest.last_n(cfg.pipeline.window)?;
        let first = window.entries.first().map_or(0, |e| e.step);
        out["straddles_switch"] = json!(first <= switch && switch < last.step);
    }
    Ok(out)
}

fn run(cli: &Cli, a: &RunArgs) -> Result<Value> {
    let mut cfg = match &a.config {
        Some(path) => read_json::<TrainConfig>(path)?,
        None => TrainConfig::toy(),
    };
    if let Some(seed) = cli.seed {
        cfg.pipeline.seed = seed;
    }
    cfg.pipeline.record_updates = true;
    cfg.problem.validate()?;
    cfg.optimizer.validate()?;
    cfg.pipeline.validate()?;
    strategy_weights::<f64>(&cfg.pipeline.strategy, cfg.pipeline.window - 1)?;
    let root = store_root(cli)?;
    report_seed(cfg.pipeline.seed);
    if cli.dry_run {
        let mut plan = train_plan(&cfg, &root);
        plan["stages"] = json!(["train", "merge", "verify", "analyze"]);
        plan["artifacts"] = json!([MERGED_FILE, VERIFY_FILE, ANALYSIS_FILE]);
        return Ok(json!({ "plan": plan }));
    }
    let report = end_to_end(&cfg, &root)?;
    Ok(serde_json::to_value(report).expect("report serializes"))
}
