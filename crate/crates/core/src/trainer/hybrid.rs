//! Combinations of an explicit decay phase with checkpoint merging.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::ExperimentRow;
use crate::scalar::Real;
use crate::schedule::{CurveSpec, LrScheduleConfig, ScheduleKind};
use crate::tensorstore::TensorMap;
use crate::weights::strategy_weights;

use super::{
    merge_params, train_in_memory, Checkpoint, MemorySink, Objective, OptimizerConfig,
    PipelineConfig, ProblemConfig, Result, TrainError, Trainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridMode {
    /// Decay as usual, then merge checkpoints taken during the decay.
    DecayThenMerge,
    /// Merge the constant-LR checkpoints, then decay from the merge.
    MergeThenDecay,
}

impl FromStr for HybridMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decay_then_merge" => Ok(HybridMode::DecayThenMerge),
            "merge_then_decay" => Ok(HybridMode::MergeThenDecay),
            other => Err(TrainError::Config(format!("unknown hybrid mode {other:?}"))),
        }
    }
}

impl fmt::Display for HybridMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HybridMode::DecayThenMerge => "decay_then_merge",
            HybridMode::MergeThenDecay => "merge_then_decay",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub mode: HybridMode,
    pub problem: ProblemConfig,
    pub optimizer: OptimizerConfig,
    /// The constant-LR run. Its window and strategy drive the merge.
    pub pipeline: PipelineConfig,
    pub decay_steps: u64,
    /// `steps` is ignored; the curve is stretched over the decay.
    pub decay_curve: CurveSpec,
    #[serde(default)]
    pub eval_seed: u64,
}

/// Report rows plus evaluated loss per checkpoint of the hybrid arm and,
/// for merge-then-decay, of the plain decay arm it is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridOutcome {
    pub rows: Vec<ExperimentRow>,
    pub curve: Vec<(u64, f64)>,
    pub baseline: Vec<(u64, f64)>,
}

fn eval<T: Real>(objective: &dyn Objective<T>, problem: &ProblemConfig, theta: &[T], seed: u64) -> f64 {
    objective.eval_loss(theta, problem.data_source, seed).approx_f64()
}

fn curve<T: Real>(
    objective: &dyn Objective<T>,
    problem: &ProblemConfig,
    checkpoints: &[Checkpoint<T>],
    seed: u64,
) -> Vec<(u64, f64)> {
    checkpoints
        .iter()
        .map(|c| (c.step, eval(objective, problem, &c.params, seed)))
        .collect()
}

/// A wsd schedule that starts decaying right away and lasts `steps`.
pub fn decay_phase(pipeline: &PipelineConfig, steps: u64, curve: &CurveSpec, anneal: bool) -> PipelineConfig {
    PipelineConfig {
        schedule: ScheduleKind::Wsd,
        lr: LrScheduleConfig {
            lr_peak: pipeline.lr.lr_peak,
            warmup_steps: 0,
            max_steps: Some(steps),
            decay_start: Some(0),
            decay_curve: Some(curve.clone()),
        },
        switch_step: anneal.then_some(0),
        total_steps: steps,
        record_updates: false,
        ..pipeline.clone()
    }
}

/// Continues training from `tensors` under `decay`, returning evaluated loss
/// at step 0 and at every checkpoint.
pub fn resume_decay<T: Real>(
    problem: &ProblemConfig,
    optimizer: &OptimizerConfig,
    decay: &PipelineConfig,
    tensors: &TensorMap,
    eval_seed: u64,
) -> Result<Vec<(u64, f64)>> {
    let mut trainer = Trainer::<T>::new(problem, optimizer, decay.seed)?.with_tensors(tensors)?;
    let start = eval(trainer.objective(), problem, trainer.params(), eval_seed);
    let mut sink = MemorySink::default();
    trainer.run(decay, &mut sink)?;
    let mut out = vec![(0, start)];
    out.extend(curve(trainer.objective(), problem, &sink.checkpoints, eval_seed));
    Ok(out)
}

pub fn hybrid_run<T: Real>(config: &HybridConfig) -> Result<HybridOutcome> {
    let HybridConfig {
        mode,
        problem,
        optimizer,
        pipeline,
        decay_steps,
        decay_curve,
        eval_seed,
    } = config;
    let too_long = *mode == HybridMode::DecayThenMerge && *decay_steps > pipeline.total_steps;
    if *decay_steps == 0 || too_long {
        return Err(TrainError::Config(format!(
            "decay_steps {decay_steps} must be in 1..={}",
            pipeline.total_steps
        )));
    }
    let objective = problem.build::<T>()?;
    let objective = objective.as_ref();
    let n = pipeline.window;
    let weights = strategy_weights::<f64>(&pipeline.strategy, n.saturating_sub(1))?;
    let label = format!("{mode}/{}", pipeline.strategy.label());
    let row = |step, raw, merged, decayed| ExperimentRow {
        strategy: label.clone(),
        window: n,
        interval: pipeline.checkpoint_every,
        seed: pipeline.seed,
        step,
        raw_loss: raw,
        merged_loss: Some(merged),
        decayed_loss: Some(decayed),
    };

    match mode {
        HybridMode::DecayThenMerge => {
            let start = pipeline.total_steps - decay_steps;
            let mut wsd = pipeline.clone();
            wsd.schedule = ScheduleKind::Wsd;
            wsd.lr.max_steps = Some(pipeline.total_steps);
            wsd.lr.decay_start = Some(start);
            wsd.lr.decay_curve = Some(decay_curve.clone());
            wsd.record_updates = false;
            let run = train_in_memory::<T>(problem, optimizer, &wsd)?;
            let window = run.last_n(n).ok_or_else(|| {
                TrainError::Config(format!(
                    "window {n} exceeds the {} checkpoints saved",
                    run.checkpoints.len()
                ))
            })?;
            let first = &run.checkpoints[run.checkpoints.len() - n];
            if first.step < start {
                return Err(TrainError::Config(format!(
                    "window starts at step {} before the decay begins at {start}",
                    first.step
                )));
            }
            let at_start = run
                .checkpoints
                .iter()
                .rev()
                .find(|c| c.step <= start)
                .ok_or_else(|| TrainError::Config(format!("no checkpoint at or before step {start}")))?;
            let merged = merge_params(&window, weights.c());
            let last = run.checkpoints.last().expect("window is non-empty");
            let raw = eval(objective, problem, &at_start.params, *eval_seed);
            let merged = eval(objective, problem, &merged, *eval_seed);
            let decayed = eval(objective, problem, &last.params, *eval_seed);
            Ok(HybridOutcome {
                rows: vec![row(last.step, raw, merged, decayed)],
                curve: curve(objective, problem, &run.checkpoints, *eval_seed),
                baseline: Vec::new(),
            })
        }
        HybridMode::MergeThenDecay => {
            let run = train_in_memory::<T>(problem, optimizer, pipeline)?;
            let window = run.last_n(n).ok_or_else(|| {
                TrainError::Config(format!(
                    "window {n} exceeds the {} checkpoints saved",
                    run.checkpoints.len()
                ))
            })?;
            let last = run.checkpoints.last().expect("window is non-empty");
            let layout = objective.layout();
            let merged = layout.to_tensors(&merge_params(&window, weights.c()));
            let raw = layout.to_tensors(&last.params);
            let anneal = pipeline.switch_step.is_some_and(|s| last.step > s);
            let mut decay = decay_phase(pipeline, *decay_steps, decay_curve, anneal);
            decay.checkpoint_every = decay.checkpoint_every.min(*decay_steps);
            let from_merged = resume_decay::<T>(problem, optimizer, &decay, &merged, *eval_seed)?;
            let from_raw = resume_decay::<T>(problem, optimizer, &decay, &raw, *eval_seed)?;
            let raw_loss = eval(objective, problem, &last.params, *eval_seed);
            let end = |c: &[(u64, f64)]| c.last().expect("step 0 is always present").1;
            Ok(HybridOutcome {
                rows: vec![row(
                    last.step + decay_steps,
                    raw_loss,
                    end(&from_merged),
                    end(&from_raw),
                )],
                curve: from_merged,
                baseline: from_raw,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::CurveFamily;
    use crate::weights::Strategy;

    fn config(mode: HybridMode, window: usize) -> HybridConfig {
        let problem = ProblemConfig::quadratic(16, 1.0);
        let optimizer = OptimizerConfig::sgd();
        let mut pipeline = PipelineConfig::toy(&problem, &optimizer);
        pipeline.total_steps = 512;
        pipeline.checkpoint_every = 32;
        pipeline.window = window;
        pipeline.strategy = Strategy::Mean;
        pipeline.record_updates = false;
        HybridConfig {
            mode,
            problem,
            optimizer,
            pipeline,
            decay_steps: 128,
            decay_curve: CurveSpec::new(CurveFamily::OneMinusSqrt, 1, 0.0),
            eval_seed: 7,
        }
    }

    #[test]
    fn decay_then_merge_over_whole_decay() {
        // 128 decay steps at interval 32: checkpoints 384..=512 are five
        let out = hybrid_run::<f64>(&config(HybridMode::DecayThenMerge, 5)).unwrap();
        assert_eq!(out.rows.len(), 1);
        let row = &out.rows[0];
        assert_eq!(row.step, 512);
        assert!(row.merged_loss.is_some() && row.decayed_loss.is_some());
        assert!(hybrid_run::<f64>(&config(HybridMode::DecayThenMerge, 6)).is_err());
    }

    #[test]
    fn merge_then_decay_starts_at_merged_loss() {
        let cfg = config(HybridMode::MergeThenDecay, 4);
        let out = hybrid_run::<f64>(&cfg).unwrap();
        let run = train_in_memory::<f64>(&cfg.problem, &cfg.optimizer, &cfg.pipeline).unwrap();
        let w = strategy_weights::<f64>(&Strategy::Mean, 3).unwrap();
        let merged = merge_params(&run.last_n(4).unwrap(), w.c());
        let obj = cfg.problem.build::<f64>().unwrap();
        let expected = obj.eval_loss(&merged, cfg.problem.data_source, cfg.eval_seed);
        assert_eq!(out.curve[0], (0, expected));
        assert_eq!(out.curve.last().unwrap().0, 128);
    }

    #[test]
    fn window_of_one_is_the_plain_arm() {
        for mode in [HybridMode::DecayThenMerge, HybridMode::MergeThenDecay] {
            let out = hybrid_run::<f64>(&config(mode, 1)).unwrap();
            let row = &out.rows[0];
            assert_eq!(row.merged_loss, row.decayed_loss, "{mode}");
        }
    }

    #[test]
    fn resume_rejects_wrong_shapes() {
        let cfg = config(HybridMode::MergeThenDecay, 2);
        let other = ProblemConfig::quadratic(3, 1.0);
        let obj = other.build::<f64>().unwrap();
        let tensors = obj.layout().to_tensors(&[0.0; 3]);
        let decay = decay_phase(&cfg.pipeline, 32, &cfg.decay_curve, false);
        let err = resume_decay::<f64>(&cfg.problem, &cfg.optimizer, &decay, &tensors, 0).unwrap_err();
        assert!(matches!(err, TrainError::Shape(_)));
    }
}
