//! Diagnostics, loss evaluation and sweep reports.

mod spectral;
mod sweep;

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorstore::{CheckpointArchive, StoreError};
use crate::trainer::{ProblemConfig, TrainError};

pub use spectral::{condition_number, singular_values, svd_entropy, Matrix, RANK_TOLERANCE};
pub use sweep::{sweep, DecayArm, Granularity, SweepConfig};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid sweep: {0}")]
    Config(String),
    #[error("duplicate report row {0}")]
    DuplicateRow(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl AnalysisError {
    pub fn is_io(&self) -> bool {
        match self {
            AnalysisError::Io { .. } => true,
            AnalysisError::Store(e) => e.is_io(),
            AnalysisError::Train(e) => e.is_io(),
            AnalysisError::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}

/// Relative deviation of the busiest and idlest expert from the mean load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violations {
    pub max_violation: f64,
    pub min_violation: f64,
}

pub fn load_violations(loads: &[f64]) -> Result<Violations, AnalysisError> {
    if loads.is_empty() {
        return Err(AnalysisError::Domain("empty load vector".into()));
    }
    if let Some(bad) = loads.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(AnalysisError::Domain(format!("load {bad} is not a non-negative number")));
    }
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    if mean <= 0.0 {
        return Err(AnalysisError::Domain("mean load is zero".into()));
    }
    let max = loads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = loads.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Violations {
        max_violation: (max - mean).abs() / mean,
        min_violation: (min - mean).abs() / mean,
    })
}

/// Layer averages of the per-layer violations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalViolations {
    pub mean_global_max_violation: f64,
    pub mean_global_min_violation: f64,
    pub layers: usize,
}

pub fn mean_violations(layers: &[Vec<f64>]) -> Result<GlobalViolations, AnalysisError> {
    if layers.is_empty() {
        return Err(AnalysisError::Domain("no load vectors".into()));
    }
    let per = layers
        .iter()
        .map(|l| load_violations(l))
        .collect::<Result<Vec<_>, _>>()?;
    let n = per.len() as f64;
    Ok(GlobalViolations {
        mean_global_max_violation: per.iter().map(|v| v.max_violation).sum::<f64>() / n,
        mean_global_min_violation: per.iter().map(|v| v.min_violation).sum::<f64>() / n,
        layers: per.len(),
    })
}

/// Held-out loss of the parameters stored in `archive`.
pub fn evaluate_loss(
    archive: &CheckpointArchive,
    problem: &ProblemConfig,
    eval_seed: u64,
) -> Result<f64, AnalysisError> {
    let objective = problem.build::<f64>()?;
    let tensors = archive.read_all()?;
    let theta: Vec<f64> = objective.layout().from_tensors(&tensors)?;
    Ok(objective.eval_loss(&theta, problem.data_source, eval_seed))
}

/// One line of a sweep report. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub strategy: String,
    pub window: usize,
    pub interval: u64,
    pub seed: u64,
    pub step: u64,
    pub raw_loss: f64,
    /// Empty when the cell was skipped.
    pub merged_loss: Option<f64>,
    pub decayed_loss: Option<f64>,
}

pub type RowKey = (String, usize, u64, u64, u64);

impl ExperimentRow {
    pub fn key(&self) -> RowKey {
        (self.strategy.clone(), self.window, self.interval, self.seed, self.step)
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }
}

/// Seed aggregate of one `(strategy, window, interval)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub strategy: String,
    pub window: usize,
    pub interval: u64,
    pub raw_loss: Stat,
    pub merged_loss: Option<Stat>,
    pub decayed_loss: Option<Stat>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects a row whose key is already present.
    pub fn push(&mut self, row: ExperimentRow) -> Result<(), AnalysisError> {
        let key = row.key();
        if self.rows.iter().any(|r| r.key() == key) {
            return Err(AnalysisError::DuplicateRow(format!("{key:?}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[ExperimentRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn sort(&mut self) {
        self.rows.sort_by_key(ExperimentRow::key);
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record([
                "strategy",
                "window",
                "interval",
                "seed",
                "step",
                "raw_loss",
                "merged_loss",
                "decayed_loss",
            ])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| AnalysisError::Io {
            path: "<csv>".into(),
            source: e,
        })
    }

    pub fn to_csv_string(&self) -> Result<String, AnalysisError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), AnalysisError> {
        let file = std::fs::File::create(path).map_err(|e| AnalysisError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.write_csv(io::BufWriter::new(file))
    }

    pub fn read_csv<R: io::Read>(input: R) -> Result<Self, AnalysisError> {
        let mut report = ExperimentReport::new();
        for row in csv::Reader::from_reader(input).deserialize() {
            report.push(row?)?;
        }
        Ok(report)
    }

    /// Seed statistics per `(strategy, window, interval)`; skipped cells
    /// count toward raw loss only.
    pub fn summarize(&self) -> Vec<CellSummary> {
        let mut cells: BTreeMap<(String, usize, u64), Vec<&ExperimentRow>> = BTreeMap::new();
        for row in &self.rows {
            cells
                .entry((row.strategy.clone(), row.window, row.interval))
                .or_default()
                .push(row);
        }
        cells
            .into_iter()
            .map(|((strategy, window, interval), rows)| {
                let raw: Vec<f64> = rows.iter().map(|r| r.raw_loss).collect();
                let merged: Vec<f64> = rows.iter().filter_map(|r| r.merged_loss).collect();
                let decayed: Vec<f64> = rows.iter().filter_map(|r| r.decayed_loss).collect();
                CellSummary {
                    strategy,
                    window,
                    interval,
                    raw_loss: Stat::of(&raw).expect("cell has rows"),
                    merged_loss: Stat::of(&merged),
                    decayed_loss: Stat::of(&decayed),
                }
            })
            .collect()
    }

    pub fn summary(&self, strategy: &str, window: usize, interval: u64) -> Option<CellSummary> {
        self.summarize()
            .into_iter()
            .find(|c| c.strategy == strategy && c.window == window && c.interval == interval)
    }
}

impl Extend<ExperimentRow> for ExperimentReport {
    /// Later duplicates are dropped.
    fn extend<I: IntoIterator<Item = ExperimentRow>>(&mut self, rows: I) {
        for row in rows {
            let _ = self.push(row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn violation_examples() {
        let v = load_violations(&[10.0, 20.0, 30.0]).unwrap();
        assert_eq!((v.max_violation, v.min_violation), (0.5, 0.5));
        let v = load_violations(&[7.0; 5]).unwrap();
        assert_eq!((v.max_violation, v.min_violation), (0.0, 0.0));
        let v = load_violations(&[0.0, 2.0]).unwrap();
        assert_eq!((v.max_violation, v.min_violation), (1.0, 1.0));
        assert!(load_violations(&[0.0, 0.0]).is_err());
        assert!(load_violations(&[]).is_err());
        assert!(load_violations(&[-1.0, 3.0]).is_err());
    }

    #[test]
    fn layer_means() {
        let g = mean_violations(&[vec![10.0, 20.0, 30.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(g.mean_global_max_violation, 0.75);
        assert_eq!(g.layers, 2);
    }

    fn row(strategy: &str, window: usize, seed: u64, merged: Option<f64>) -> ExperimentRow {
        ExperimentRow {
            strategy: strategy.into(),
            window,
            interval: 64,
            seed,
            step: 4096,
            raw_loss: 1.0 + seed as f64,
            merged_loss: merged,
            decayed_loss: None,
        }
    }

    #[test]
    fn csv_schema_and_round_trip() {
        let mut report = ExperimentReport::new();
        report.push(row("mean", 4, 0, Some(0.5))).unwrap();
        report.push(row("mean", 8, 0, None)).unwrap();
        let text = report.to_csv_string().unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "strategy,window,interval,seed,step,raw_loss,merged_loss,decayed_loss"
        );
        assert_eq!(lines.next().unwrap(), "mean,4,64,0,4096,1.0,0.5,");
        assert_eq!(ExperimentReport::read_csv(text.as_bytes()).unwrap(), report);
        let empty = ExperimentReport::new().to_csv_string().unwrap();
        assert_eq!(empty.lines().count(), 1);
    }

    #[test]
    fn keys_are_unique() {
        let mut report = ExperimentReport::new();
        report.push(row("mean", 4, 0, Some(0.5))).unwrap();
        assert!(report.push(row("mean", 4, 0, Some(0.7))).is_err());
    }

    #[test]
    fn seed_statistics() {
        let mut report = ExperimentReport::new();
        for seed in 0..3 {
            report.push(row("mean", 4, seed, Some(seed as f64))).unwrap();
        }
        let s = report.summary("mean", 4, 64).unwrap();
        assert_eq!(s.raw_loss.mean, 2.0);
        assert_eq!(s.merged_loss.unwrap().std, 1.0);
        assert!(s.decayed_loss.is_none());
    }
}
