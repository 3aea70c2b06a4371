use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::schedule::{CurveSpec, ScheduleKind};
use crate::trainer::{merge_params, train_in_memory, OptimizerConfig, PipelineConfig, ProblemConfig};
use crate::weights::{strategy_weights, Strategy};

use super::{AnalysisError, ExperimentReport, ExperimentRow};

/// A wsd comparison run decaying over the last `decay_steps` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayArm {
    pub decay_steps: u64,
    /// `steps` is ignored; the curve is stretched over the decay.
    pub curve: CurveSpec,
}

/// Fixed merge duration split at several checkpoint intervals; each
/// interval `i` is paired with window `duration / i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Granularity {
    pub duration: u64,
    pub intervals: Vec<u64>,
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Mean]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub problem: ProblemConfig,
    pub optimizer: OptimizerConfig,
    /// Base run; `checkpoint_every` and `seed` are overridden per cell.
    pub pipeline: PipelineConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    pub windows: Vec<usize>,
    /// Defaults to the pipeline's checkpoint interval.
    #[serde(default)]
    pub intervals: Vec<u64>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecayArm>,
    #[serde(default)]
    pub eval_seed: u64,
}

impl SweepConfig {
    /// Noisy 64-dimensional quadratic at the default toy scale.
    pub fn toy(windows: Vec<usize>, seeds: Vec<u64>) -> Self {
        let problem = ProblemConfig::quadratic(64, 1.0);
        let optimizer = OptimizerConfig::sgd();
        let mut pipeline = PipelineConfig::toy(&problem, &optimizer);
        pipeline.record_updates = false;
        SweepConfig {
            problem,
            optimizer,
            pipeline,
            strategies: default_strategies(),
            windows,
            intervals: Vec::new(),
            seeds,
            granularity: None,
            decay: None,
            eval_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: String| Err(AnalysisError::Config(m));
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.strategies.is_empty() {
            return bad("no strategies".into());
        }
        if self.windows.contains(&0) {
            return bad("windows must be at least 1".into());
        }
        let total = self.pipeline.total_steps;
        for i in self.intervals.iter().chain(self.granularity.iter().flat_map(|g| &g.intervals)) {
            if *i == 0 || *i > total {
                return bad(format!("interval {i} must be in 1..={total}"));
            }
        }
        if let Some(g) = &self.granularity {
            if let Some(i) = g.intervals.iter().find(|&&i| g.duration % i != 0) {
                return bad(format!("interval {i} does not divide duration {}", g.duration));
            }
        }
        if let Some(d) = &self.decay {
            if d.decay_steps == 0 || d.decay_steps > total - self.pipeline.lr.warmup_steps.min(total) {
                return bad(format!("decay_steps {} does not fit after warmup", d.decay_steps));
            }
            d.curve.validate().map_err(|e| AnalysisError::Config(e.to_string()))?;
        }
        let mut probe = self.pipeline.clone();
        probe.checkpoint_every = probe.checkpoint_every.max(1);
        probe.validate()?;
        self.problem.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }

    /// Windows to merge at each interval.
    pub fn cells(&self) -> BTreeMap<u64, BTreeSet<usize>> {
        let mut cells: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
        let grid = if self.intervals.is_empty() {
            vec![self.pipeline.checkpoint_every]
        } else {
            self.intervals.clone()
        };
        for i in grid {
            cells.entry(i).or_default().extend(self.windows.iter().copied());
        }
        if let Some(g) = &self.granularity {
            for &i in &g.intervals {
                cells.entry(i).or_default().insert((g.duration / i) as usize);
            }
        }
        cells
    }
}

fn decayed_loss(config: &SweepConfig, arm: &DecayArm, seed: u64) -> Result<f64, AnalysisError> {
    let total = config.pipeline.total_steps;
    let mut pipe = config.pipeline.clone();
    pipe.schedule = ScheduleKind::Wsd;
    pipe.lr.max_steps = Some(total);
    pipe.lr.decay_start = Some(total - arm.decay_steps);
    pipe.lr.decay_curve = Some(arm.curve.clone());
    pipe.checkpoint_every = total;
    pipe.seed = seed;
    pipe.record_updates = false;
    let run = train_in_memory::<f64>(&config.problem, &config.optimizer, &pipe)?;
    let last = run.checkpoints.last().expect("one checkpoint at the final step");
    let objective = config.problem.build::<f64>()?;
    Ok(objective.eval_loss(&last.params, config.problem.data_source, config.eval_seed))
}

fn run_cell(
    config: &SweepConfig,
    interval: u64,
    windows: &BTreeSet<usize>,
    seed: u64,
    decayed: Option<f64>,
) -> Result<Vec<ExperimentRow>, AnalysisError> {
    let mut pipe = config.pipeline.clone();
    pipe.checkpoint_every = interval;
    pipe.seed = seed;
    pipe.record_updates = false;
    let run = train_in_memory::<f64>(&config.problem, &config.optimizer, &pipe)?;
    let objective = config.problem.build::<f64>()?;
    let eval = |theta: &[f64]| objective.eval_loss(theta, config.problem.data_source, config.eval_seed);
    let last = run.checkpoints.last().expect("interval is within total_steps");
    let raw = eval(&last.params);

    let mut rows = Vec::new();
    for strategy in &config.strategies {
        for &n in windows {
            let mut row = ExperimentRow {
                strategy: strategy.label(),
                window: n,
                interval,
                seed,
                step: last.step,
                raw_loss: raw,
                merged_loss: None,
                decayed_loss: decayed,
            };
            let Some(window) = run.last_n(n) else {
                warn!(
                    "skipping {} window {n} at interval {interval}: only {} checkpoints",
                    row.strategy,
                    run.checkpoints.len()
                );
                rows.push(row);
                continue;
            };
            let weights = match strategy_weights::<f64>(strategy, n - 1) {
                Ok(w) => w,
                Err(e) => {
                    warn!("skipping {} window {n}: {e}", row.strategy);
                    rows.push(row);
                    continue;
                }
            };
            if let Some(switch) = pipe.switch_step {
                let first = run.checkpoints[run.checkpoints.len() - n].step;
                if first <= switch && switch < last.step {
                    warn!(
                        "{} window {n} at interval {interval} straddles the data switch at step {switch}",
                        row.strategy
                    );
                }
            }
            row.merged_loss = Some(eval(&merge_params(&window, weights.c())));
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Trains every `(interval, seed)` cell, merges its last checkpoints under
/// each strategy and window, and collects the evaluated losses.
pub fn sweep(config: &SweepConfig) -> Result<ExperimentReport, AnalysisError> {
    config.validate()?;
    let decayed: Vec<Option<f64>> = config
        .seeds
        .par_iter()
        .map(|&seed| config.decay.as_ref().map(|arm| decayed_loss(config, arm, seed)).transpose())
        .collect::<Result<_, _>>()?;
    let decayed: BTreeMap<u64, Option<f64>> = config.seeds.iter().copied().zip(decayed).collect();

    let cells = config.cells();
    let jobs: Vec<(u64, &BTreeSet<usize>, u64)> = cells
        .iter()
        .flat_map(|(&i, w)| config.seeds.iter().map(move |&s| (i, w, s)))
        .collect();
    let rows: Vec<Vec<ExperimentRow>> = jobs
        .par_iter()
        .map(|&(i, w, s)| run_cell(config, i, w, s, decayed[&s]))
        .collect::<Result<_, _>>()?;

    let mut report = ExperimentReport::new();
    report.extend(rows.into_iter().flatten());
    report.sort();
    Ok(report)
}
