//! Deterministic toy training harness.
//!
//! Training runs warmup then a stable (or decaying) phase over one of the
//! problems in [`problem`], optionally switching to the annealing
//! distribution, and saves a checkpoint every `checkpoint_every` steps.
//! When `record_updates` is set every realized parameter delta
//! `theta_{t-1} - theta_t` is kept so merges can be checked against the
//! update-reweighting identity.

pub mod hybrid;
mod optim;
mod problem;

use std::path::PathBuf;
use std::sync::mpsc::Sender;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::merger::{weighted_sum, MergeError};
use crate::scalar::Real;
use crate::schedule::{lr_at, LrScheduleConfig, ScheduleError, ScheduleKind};
use crate::tensorstore::{
    ArchiveMetadata, ManifestEntry, Store, StoreError, Tensor, TensorMap, TrajectoryManifest,
};
use crate::weights::{Strategy, WeightError};

pub use hybrid::{hybrid_run, HybridConfig, HybridMode, HybridOutcome};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use problem::{DataSource, Objective, ParamLayout, ProblemConfig, ProblemKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step} (non-finite loss or parameters)")]
    Diverged { step: u64 },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Weights(#[from] WeightError),
}

impl TrainError {
    pub fn is_io(&self) -> bool {
        match self {
            TrainError::Store(e) => e.is_io(),
            TrainError::Merge(e) => e.is_io(),
            _ => false,
        }
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn default_window() -> usize {
    8
}
fn default_strategy() -> Strategy {
    Strategy::Mean
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schedule: ScheduleKind,
    pub lr: LrScheduleConfig,
    /// Training switches to the annealing data for steps after this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_step: Option<u64>,
    pub checkpoint_every: u64,
    pub total_steps: u64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub record_updates: bool,
}

impl PipelineConfig {
    /// Constant-LR run with the default toy scale: 4096 steps, a checkpoint
    /// every 64, warmup 64, mean merge over 8.
    pub fn toy(problem: &ProblemConfig, optimizer: &OptimizerConfig) -> Self {
        PipelineConfig {
            schedule: ScheduleKind::Wsm,
            lr: LrScheduleConfig::constant(optimizer.default_lr(problem.default_lr()), 64),
            switch_step: None,
            checkpoint_every: 64,
            total_steps: 4096,
            window: default_window(),
            strategy: default_strategy(),
            seed: 0,
            record_updates: true,
        }
    }

    /// The LR config with `max_steps` defaulted to `total_steps`.
    pub fn lr_config(&self) -> LrScheduleConfig {
        let mut lr = self.lr.clone();
        if self.schedule != ScheduleKind::Wsm && lr.max_steps.is_none() {
            lr.max_steps = Some(self.total_steps);
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_every == 0 {
            return Err(TrainError::Config("checkpoint_every must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(TrainError::Config("total_steps must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(TrainError::Config("window must be at least 1".into()));
        }
        if let Some(switch) = self.switch_step {
            if switch < self.lr.warmup_steps {
                return Err(TrainError::Config(format!(
                    "switch_step {switch} precedes the end of warmup ({})",
                    self.lr.warmup_steps
                )));
            }
        }
        let lr = self.lr_config();
        lr.validate(self.schedule)?;
        if let Some(max) = lr.max_steps.filter(|_| self.schedule != ScheduleKind::Wsm) {
            if max < self.total_steps {
                return Err(TrainError::Config(format!(
                    "schedule ends at step {max} but training runs {} steps",
                    self.total_steps
                )));
            }
        }
        Ok(())
    }

    /// Number of checkpoints a run saves.
    pub fn checkpoint_count(&self) -> u64 {
        self.total_steps / self.checkpoint_every.max(1)
    }

    pub fn source_at(&self, t: u64) -> DataSource {
        match self.switch_step {
            Some(s) if t > s => DataSource::Anneal,
            _ => DataSource::Base,
        }
    }
}

/// A saved parameter vector plus the updates applied since the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub tokens: u64,
    pub lr: f64,
    pub source: DataSource,
    pub params: Vec<T>,
    /// First step whose update is in `updates`.
    pub first_update: u64,
    /// Realized per-step deltas, oldest first; empty unless recorded.
    pub updates: Vec<Vec<T>>,
}

/// Per-step learning rates and minibatch losses; index `t - 1` is step `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub lrs: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Receives checkpoints as training produces them.
pub trait CheckpointSink<T> {
    fn save(&mut self, layout: &ParamLayout, checkpoint: Checkpoint<T>) -> Result<()>;
}

/// Keeps every checkpoint in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySink<T> {
    pub checkpoints: Vec<Checkpoint<T>>,
}

impl<T> CheckpointSink<T> for MemorySink<T> {
    fn save(&mut self, _: &ParamLayout, checkpoint: Checkpoint<T>) -> Result<()> {
        self.checkpoints.push(checkpoint);
        Ok(())
    }
}

/// Writes checkpoints and update records into a store and keeps its
/// manifest current. Each new checkpoint path is sent to `notify` once the
/// manifest lists it.
pub struct StoreSink<'a> {
    store: &'a Store,
    manifest: TrajectoryManifest,
    notify: Option<Sender<PathBuf>>,
    tag: String,
}

impl<'a> StoreSink<'a> {
    /// Fails if the store already holds a trajectory.
    pub fn new(store: &'a Store, pipeline: &PipelineConfig, batch: usize) -> Result<Self> {
        if !store.load_manifest()?.entries.is_empty() {
            return Err(StoreError::AlreadyExists {
                path: store.manifest_path(),
            }
            .into());
        }
        Ok(StoreSink {
            store,
            manifest: TrajectoryManifest {
                entries: Vec::new(),
                interval_tokens: Some(pipeline.checkpoint_every * batch as u64),
                records_updates: pipeline.record_updates,
            },
            notify: None,
            tag: pipeline.schedule.to_string(),
        })
    }

    pub fn notify(mut self, tx: Sender<PathBuf>) -> Self {
        self.notify = Some(tx);
        self
    }

    pub fn manifest(&self) -> &TrajectoryManifest {
        &self.manifest
    }

    pub fn into_manifest(self) -> TrajectoryManifest {
        self.manifest
    }
}

impl<T: Real> CheckpointSink<T> for StoreSink<'_> {
    fn save(&mut self, layout: &ParamLayout, ck: Checkpoint<T>) -> Result<()> {
        let mut meta = ArchiveMetadata::new(ck.step, ck.tokens, self.tag.clone());
        meta.provenance = Some(json!({
            "lr": ck.lr,
            "data_source": ck.source,
        }));
        let rel = Store::checkpoint_name(ck.step);
        let path = self.store.write(&rel, &layout.to_tensors(&ck.params), &meta)?;

        let updates = if self.manifest.records_updates {
            let mut tensors = TensorMap::new();
            for (i, delta) in ck.updates.iter().enumerate() {
                let t = ck.first_update + i as u64;
                for (name, shape, range) in layout.ranges() {
                    let tensor = Tensor::new(shape.to_vec(), delta[range].to_vec())?;
                    tensors.insert(format!("{name}@{t:010}"), tensor);
                }
            }
            let rel = Store::updates_name(ck.step);
            let meta = ArchiveMetadata::new(ck.step, ck.tokens, "updates");
            self.store.write(&rel, &tensors, &meta)?;
            Some(rel)
        } else {
            None
        };
        self.manifest.push(ManifestEntry {
            path: rel,
            step: ck.step,
            tokens: ck.tokens,
            updates,
        })?;
        self.store.save_manifest(&self.manifest)?;
        if let Some(tx) = &self.notify {
            // A consumer that has gone away does not stop training.
            let _ = tx.send(path);
        }
        Ok(())
    }
}

/// Parameters, optimizer state and data stream of one training run.
pub struct Trainer<T: Real> {
    problem: ProblemConfig,
    objective: Box<dyn Objective<T>>,
    optimizer: Optimizer<T>,
    theta: Vec<T>,
    data_rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(problem: &ProblemConfig, optimizer: &OptimizerConfig, seed: u64) -> Result<Self> {
        optimizer.validate()?;
        let objective = problem.build::<T>()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(2);
        let theta = objective.init(&mut init_rng);
        let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
        data_rng.set_stream(1);
        Ok(Trainer {
            problem: problem.clone(),
            optimizer: optimizer.build(theta.len()),
            objective,
            theta,
            data_rng,
        })
    }

    /// Starts from `theta` instead of the random initialization.
    pub fn with_params(mut self, theta: Vec<T>) -> Result<Self> {
        let expected = self.objective.layout().total();
        if theta.len() != expected {
            return Err(TrainError::Shape(format!(
                "{} parameters given, problem has {expected}",
                theta.len()
            )));
        }
        self.theta = theta;
        Ok(self)
    }

    /// Starts from the tensors of an archive.
    pub fn with_tensors(self, tensors: &TensorMap) -> Result<Self> {
        let theta = self.objective.layout().from_tensors(tensors)?;
        self.with_params(theta)
    }

    pub fn params(&self) -> &[T] {
        &self.theta
    }

    pub fn objective(&self) -> &dyn Objective<T> {
        self.objective.as_ref()
    }

    pub fn layout(&self) -> &ParamLayout {
        self.objective.layout()
    }

    /// Runs steps `1..=total_steps`, handing each checkpoint to `sink`.
    pub fn run<S: CheckpointSink<T>>(&mut self, pipeline: &PipelineConfig, sink: &mut S) -> Result<TrainingLog> {
        pipeline.validate()?;
        let lr_cfg = pipeline.lr_config();
        let n = self.theta.len();
        let mut grad = vec![T::zero(); n];
        let mut log = TrainingLog::default();
        let mut pending: Vec<Vec<T>> = Vec::new();
        let mut first_update = 1;
        let batch = self.problem.batch_size as u64;

        for t in 1..=pipeline.total_steps {
            let lr = lr_at(&lr_cfg, pipeline.schedule, t)?;
            let source = pipeline.source_at(t);
            let loss = self
                .objective
                .sample_grad(&self.theta, source, &mut self.data_rng, &mut grad);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step: t });
            }
            let before = pipeline.record_updates.then(|| self.theta.clone());
            self.optimizer.step(&mut self.theta, &grad, T::lit(lr));
            if self.theta.iter().any(|p| !p.is_finite()) {
                return Err(TrainError::Diverged { step: t });
            }
            if let Some(before) = before {
                pending.push(before.iter().zip(&self.theta).map(|(&a, &b)| a - b).collect());
            }
            log.lrs.push(lr);
            log.losses.push(loss.approx_f64());

            if t % pipeline.checkpoint_every == 0 {
                let checkpoint = Checkpoint {
                    step: t,
                    tokens: t * batch,
                    lr,
                    source,
                    params: self.theta.clone(),
                    first_update,
                    updates: std::mem::take(&mut pending),
                };
                sink.save(self.objective.layout(), checkpoint)?;
                first_update = t + 1;
            }
        }
        Ok(log)
    }
}

/// Checkpoints and log of an in-memory run.
#[derive(Debug, Clone)]
pub struct MemoryTrajectory<T> {
    pub checkpoints: Vec<Checkpoint<T>>,
    pub log: TrainingLog,
}

impl<T: Real> MemoryTrajectory<T> {
    /// Parameter vectors of the last `n` checkpoints, oldest first.
    pub fn last_n(&self, n: usize) -> Option<Vec<&[T]>> {
        let len = self.checkpoints.len();
        (n >= 1 && n <= len).then(|| {
            self.checkpoints[len - n..]
                .iter()
                .map(|c| c.params.as_slice())
                .collect()
        })
    }
}

pub fn train_in_memory<T: Real>(
    problem: &ProblemConfig,
    optimizer: &OptimizerConfig,
    pipeline: &PipelineConfig,
) -> Result<MemoryTrajectory<T>> {
    let mut trainer = Trainer::<T>::new(problem, optimizer, pipeline.seed)?;
    let mut sink = MemorySink::default();
    let log = trainer.run(pipeline, &mut sink)?;
    Ok(MemoryTrajectory {
        checkpoints: sink.checkpoints,
        log,
    })
}

/// Trains into `store`; checkpoint paths go to `notify` as they land.
pub fn run_pipeline<T: Real>(
    problem: &ProblemConfig,
    optimizer: &OptimizerConfig,
    pipeline: &PipelineConfig,
    store: &Store,
    notify: Option<Sender<PathBuf>>,
) -> Result<TrajectoryManifest> {
    pipeline.validate()?;
    let mut trainer = Trainer::<T>::new(problem, optimizer, pipeline.seed)?;
    let mut sink = StoreSink::new(store, pipeline, problem.batch_size)?;
    if let Some(tx) = notify {
        sink = sink.notify(tx);
    }
    trainer.run(pipeline, &mut sink)?;
    Ok(sink.into_manifest())
}

/// The conventional decay arm; `pipeline` must use the wsd schedule.
pub fn run_decay_baseline<T: Real>(
    problem: &ProblemConfig,
    optimizer: &OptimizerConfig,
    pipeline: &PipelineConfig,
    store: &Store,
) -> Result<TrajectoryManifest> {
    if pipeline.schedule != ScheduleKind::Wsd {
        return Err(TrainError::Config(format!(
            "decay baseline needs the wsd schedule, got {}",
            pipeline.schedule
        )));
    }
    run_pipeline::<T>(problem, optimizer, pipeline, store, None)
}

/// Weighted combination of parameter vectors, accumulated in f64 exactly as
/// archive merges are.
pub fn merge_params<T: Real>(params: &[&[T]], c: &[f64]) -> Vec<T> {
    let wide: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.iter().map(|x| x.approx_f64()).collect())
        .collect();
    let refs: Vec<&[f64]> = wide.iter().map(Vec::as_slice).collect();
    weighted_sum(&refs, c).into_iter().map(T::lit).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{CurveFamily, CurveSpec};

    fn small(total: u64, every: u64) -> (ProblemConfig, OptimizerConfig, PipelineConfig) {
        let problem = ProblemConfig::quadratic(8, 1.0);
        let opt = OptimizerConfig::sgd();
        let mut pipe = PipelineConfig::toy(&problem, &opt);
        pipe.total_steps = total;
        pipe.checkpoint_every = every;
        pipe.lr.warmup_steps = 10;
        pipe.lr.lr_peak = 0.1;
        (problem, opt, pipe)
    }

    #[test]
    fn checkpoint_steps() {
        let (problem, opt, pipe) = small(100, 25);
        let run = train_in_memory::<f64>(&problem, &opt, &pipe).unwrap();
        let steps: Vec<u64> = run.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, [25, 50, 75, 100]);
        assert_eq!(run.log.lrs.len(), 100);
        assert!(run.checkpoints.iter().all(|c| c.updates.len() == 25));
    }

    #[test]
    fn same_seed_same_run() {
        let (problem, opt, pipe) = small(60, 20);
        let a = train_in_memory::<f64>(&problem, &opt, &pipe).unwrap();
        let b = train_in_memory::<f64>(&problem, &opt, &pipe).unwrap();
        for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.params), bits(&y.params));
        }
        let mut other = pipe.clone();
        other.seed = 1;
        let c = train_in_memory::<f64>(&problem, &opt, &other).unwrap();
        assert_ne!(a.checkpoints[0].params, c.checkpoints[0].params);
    }

    #[test]
    fn stable_lr_is_exactly_peak() {
        let (problem, opt, pipe) = small(50, 10);
        let run = train_in_memory::<f64>(&problem, &opt, &pipe).unwrap();
        for (i, &lr) in run.log.lrs.iter().enumerate() {
            let t = i as u64 + 1;
            if t >= pipe.lr.warmup_steps {
                assert_eq!(lr, pipe.lr.lr_peak);
            } else {
                assert!(lr < pipe.lr.lr_peak);
            }
        }
    }

    #[test]
    fn noiseless_gd_descends() {
        let problem = ProblemConfig::quadratic(16, 0.0);
        let opt = OptimizerConfig::sgd();
        let mut pipe = PipelineConfig::toy(&problem, &opt);
        pipe.total_steps = 200;
        pipe.checkpoint_every = 50;
        // below 2 / lambda_max = 2
        pipe.lr = LrScheduleConfig::constant(1.5, 0);
        let run = train_in_memory::<f64>(&problem, &opt, &pipe).unwrap();
        for pair in run.log.losses.windows(2) {
            assert!(pair[1] < pair[0], "{} then {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn updates_telescope_between_checkpoints() {
        for opt in [
            OptimizerConfig::sgd(),
            OptimizerConfig::momentum(0.9),
            OptimizerConfig::adaptive(),
        ] {
            let (problem, _, mut pipe) = small(90, 30);
            pipe.lr.lr_peak = opt.default_lr(0.1);
            let run = train_in_memory::<f64>(&problem, &opt, &pipe).unwrap();
            for pair in run.checkpoints.windows(2) {
                let mut sum = vec![0.0; pair[0].params.len()];
                for u in &pair[1].updates {
                    sum.iter_mut().zip(u).for_each(|(s, x)| *s += x);
                }
                let scale = pair[0].params.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                for ((a, b), s) in pair[0].params.iter().zip(&pair[1].params).zip(&sum) {
                    assert!(((a - b) - s).abs() <= 1e-12 * scale, "{:?}", opt.kind);
                }
            }
        }
    }

    #[test]
    fn wsd_ends_at_zero_lr() {
        let (problem, opt, mut pipe) = small(80, 20);
        pipe.schedule = ScheduleKind::Wsd;
        pipe.lr.decay_start = Some(40);
        pipe.lr.decay_curve = Some(CurveSpec::new(CurveFamily::OneMinusSqrt, 1, 0.0));
        let run = train_in_memory::<f64>(&problem, &opt, &pipe).unwrap();
        assert_eq!(*run.log.lrs.last().unwrap(), 0.0);
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let manifest = run_decay_baseline::<f64>(&problem, &opt, &pipe, &store).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        pipe.schedule = ScheduleKind::Wsm;
        assert!(run_decay_baseline::<f64>(&problem, &opt, &pipe, &store).is_err());
    }

    #[test]
    fn data_switch_is_strictly_after() {
        let (_, _, mut pipe) = small(100, 10);
        pipe.switch_step = Some(60);
        assert_eq!(pipe.source_at(60), DataSource::Base);
        assert_eq!(pipe.source_at(61), DataSource::Anneal);
        pipe.switch_step = Some(5);
        assert!(pipe.validate().is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let problem = ProblemConfig::quadratic(4, 0.0);
        let opt = OptimizerConfig::sgd();
        let mut pipe = PipelineConfig::toy(&problem, &opt);
        pipe.lr = LrScheduleConfig::constant(50.0, 0);
        pipe.total_steps = 2000;
        match train_in_memory::<f64>(&problem, &opt, &pipe) {
            Err(TrainError::Diverged { step }) => assert!(step > 1 && step < 2000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn store_run_writes_manifest_and_updates() {
        let (problem, opt, pipe) = small(40, 10);
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let (tx, rx) = std::sync::mpsc::channel();
        let manifest = run_pipeline::<f64>(&problem, &opt, &pipe, &store, Some(tx)).unwrap();
        assert_eq!(manifest, store.load_manifest().unwrap());
        assert_eq!(manifest.entries[0].path, "ckpt_0000000010.wsmt");
        assert_eq!(rx.iter().count(), 4);
        let upd = crate::tensorstore::read_archive(store.resolve(manifest.entries[1].updates.as_ref().unwrap())).unwrap();
        assert_eq!(upd.tensors().len(), 10);
        assert!(upd.tensors().contains_key("theta@0000000011"));
        // a second run into the same store is refused
        assert!(run_pipeline::<f64>(&problem, &opt, &pipe, &store, None).is_err());
    }

    #[test]
    fn f32_training_runs() {
        let problem = ProblemConfig::new(ProblemKind::Mlp);
        let opt = OptimizerConfig::adaptive();
        let mut pipe = PipelineConfig::toy(&problem, &opt);
        pipe.total_steps = 64;
        pipe.checkpoint_every = 32;
        let run = train_in_memory::<f32>(&problem, &opt, &pipe).unwrap();
        assert_eq!(run.checkpoints.len(), 2);
    }
}
