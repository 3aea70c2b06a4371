//! Weighted checkpoint merging.
//!
//! Every output element is `sum_j c_j * x_j`, accumulated in f64 from the
//! oldest checkpoint to the newest with fused multiply-adds, then cast to
//! the tensor's dtype. Tensors are processed independently and in chunks,
//! so a merge holds one chunk per input plus one accumulator, and the bytes
//! produced do not depend on how many threads run it.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::scalar::Coefficient;
use crate::tensorstore::{
    check_compatible, check_pair, layout, read_archive, ArchiveMetadata, ArchiveWriter,
    CheckpointArchive, Store, StoreError, Tensor, TensorMap, TrajectoryManifest,
};
use crate::weights::{merge_to_decay, strategy_weights, MergeWeights, Strategy, WeightError};

/// Elements per streamed chunk.
pub const DEFAULT_CHUNK: usize = 1 << 16;

/// Tolerance `verify_identity` is held to on f64 trajectories.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("{inputs} inputs but {weights} weights")]
    LengthMismatch { inputs: usize, weights: usize },
    #[error("{path}: step {step} does not follow step {previous}")]
    NotAscending {
        path: PathBuf,
        step: u64,
        previous: u64,
    },
    #[error("no inputs to merge")]
    NoInputs,
    #[error("window size must be at least 1")]
    EmptyWindow,
    #[error("update records unavailable: {0}")]
    MissingUpdates(String),
}

impl MergeError {
    pub fn is_io(&self) -> bool {
        matches!(self, MergeError::Store(e) if e.is_io())
    }
}

type Result<T, E = MergeError> = std::result::Result<T, E>;

/// `acc += c * x`, or `acc = c * x` for the first contributing input.
fn accumulate(acc: &mut [f64], x: &[f64], c: f64, first: bool) {
    if first {
        acc.iter_mut().zip(x).for_each(|(a, &v)| *a = c * v);
    } else {
        acc.iter_mut().zip(x).for_each(|(a, &v)| *a = v.mul_add(c, *a));
    }
}

/// In-memory form of the merge kernel over equally sized slices.
///
/// Zero weights contribute nothing, so `c = [0, ..., 0, 1]` reproduces the
/// newest input bit for bit (signed zeros included).
pub fn weighted_sum(inputs: &[&[f64]], c: &[f64]) -> Vec<f64> {
    assert_eq!(inputs.len(), c.len(), "one weight per input");
    let len = inputs.first().map_or(0, |x| x.len());
    let mut acc = vec![0.0; len];
    let mut first = true;
    for (x, &cj) in inputs.iter().zip(c) {
        assert_eq!(x.len(), len, "inputs must have equal length");
        if cj == 0.0 {
            continue;
        }
        accumulate(&mut acc, x, cj, first);
        first = false;
    }
    acc
}

/// `sum_j c_j theta_j` in any coefficient type; exact for rationals.
pub fn weighted_average<T: Coefficient>(checkpoints: &[Vec<T>], c: &[T]) -> Vec<T> {
    assert_eq!(checkpoints.len(), c.len(), "one weight per checkpoint");
    let len = checkpoints.first().map_or(0, Vec::len);
    (0..len)
        .map(|i| {
            checkpoints
                .iter()
                .zip(c)
                .fold(T::zero(), |acc, (theta, cj)| acc + cj.clone() * theta[i].clone())
        })
        .collect()
}

/// `theta_n - sum_i w_i g_i`: the same merge seen as reweighted updates.
pub fn reweighted_updates<T: Coefficient>(base: &[T], updates: &[Vec<T>], w: &[T]) -> Vec<T> {
    assert_eq!(updates.len(), w.len(), "one coefficient per update");
    base.iter()
        .enumerate()
        .map(|(i, theta)| {
            let shift = updates
                .iter()
                .zip(w)
                .fold(T::zero(), |acc, (g, wi)| acc + wi.clone() * g[i].clone());
            theta.clone() - shift
        })
        .collect()
}

/// A validated offline merge.
pub struct MergePlan {
    inputs: Vec<CheckpointArchive>,
    weights: MergeWeights<f64>,
    tag: String,
    chunk: usize,
}

impl MergePlan {
    /// `inputs` must be step-ascending and compatible; `weights[0]` pairs
    /// with the oldest input.
    pub fn new(
        inputs: Vec<CheckpointArchive>,
        weights: MergeWeights<f64>,
        tag: impl Into<String>,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(MergeError::NoInputs);
        }
        if inputs.len() != weights.len() {
            return Err(MergeError::LengthMismatch {
                inputs: inputs.len(),
                weights: weights.len(),
            });
        }
        for pair in inputs.windows(2) {
            let (prev, next) = (pair[0].metadata().step, pair[1].metadata().step);
            if next <= prev {
                return Err(MergeError::NotAscending {
                    path: pair[1].path().to_path_buf(),
                    step: next,
                    previous: prev,
                });
            }
        }
        check_compatible(&inputs)?;
        Ok(MergePlan {
            inputs,
            weights,
            tag: tag.into(),
            chunk: DEFAULT_CHUNK,
        })
    }

    pub fn open<P: AsRef<Path>>(
        paths: &[P],
        weights: MergeWeights<f64>,
        tag: impl Into<String>,
    ) -> Result<Self> {
        let inputs = paths
            .iter()
            .map(read_archive)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(inputs, weights, tag)
    }

    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    pub fn inputs(&self) -> &[CheckpointArchive] {
        &self.inputs
    }

    pub fn weights(&self) -> &MergeWeights<f64> {
        &self.weights
    }

    fn newest(&self) -> &CheckpointArchive {
        self.inputs.last().expect("plan has inputs")
    }

    pub fn output_metadata(&self) -> ArchiveMetadata {
        let newest = self.newest().metadata();
        let inputs: Vec<_> = self
            .inputs
            .iter()
            .map(|a| {
                json!({
                    "step": a.metadata().step,
                    "file": a.path().file_name().map(|n| n.to_string_lossy().into_owned()),
                })
            })
            .collect();
        ArchiveMetadata {
            step: newest.step,
            tokens: newest.tokens,
            tag: self.tag.clone(),
            provenance: Some(json!({
                "weights": self.weights,
                "inputs": inputs,
            })),
        }
    }

    fn merge_range(&self, name: &str, start: usize, out: &mut [f64], scratch: &mut [f64]) -> Result<()> {
        let mut first = true;
        for (archive, &c) in self.inputs.iter().zip(self.weights.c()) {
            if c == 0.0 {
                continue;
            }
            archive.read_f64_range(name, start, scratch)?;
            accumulate(out, scratch, c, first);
            first = false;
        }
        Ok(())
    }

    fn merge_tensor(&self, name: &str, mut sink: impl FnMut(usize, &[f64]) -> Result<()>) -> Result<()> {
        let numel = self.newest().tensors()[name].numel();
        let mut acc = vec![0.0; self.chunk.min(numel)];
        let mut scratch = acc.clone();
        let mut start = 0;
        while start < numel {
            let len = self.chunk.min(numel - start);
            self.merge_range(name, start, &mut acc[..len], &mut scratch[..len])?;
            sink(start, &acc[..len])?;
            start += len;
        }
        Ok(())
    }

    /// Streams the merge into a new archive at `out`.
    pub fn execute(&self, out: impl AsRef<Path>) -> Result<PathBuf> {
        let reference = self.newest().tensors();
        let metas = layout(
            reference
                .iter()
                .map(|(name, m)| (name.as_str(), m.dtype, m.shape.as_slice())),
        )?;
        let writer = ArchiveWriter::create(out, metas, self.output_metadata())?;
        let names: Vec<&String> = reference.keys().collect();
        names.par_iter().try_for_each(|name| {
            self.merge_tensor(name, |start, values| {
                writer.write_region(name, start, values)?;
                Ok(())
            })
        })?;
        Ok(writer.finish()?)
    }

    /// Runs the merge without touching disk.
    pub fn execute_in_memory(&self) -> Result<MergedCheckpoint> {
        let reference = self.newest().tensors();
        let tensors = reference
            .par_iter()
            .map(|(name, meta)| {
                let mut values = Vec::with_capacity(meta.numel());
                self.merge_tensor(name, |_, chunk| {
                    values.extend_from_slice(chunk);
                    Ok(())
                })?;
                Ok((name.clone(), Tensor::from_f64(meta.dtype, meta.shape.clone(), &values)?))
            })
            .collect::<Result<TensorMap>>()?;
        Ok(MergedCheckpoint {
            tensors,
            metadata: self.output_metadata(),
        })
    }
}

/// Merge result held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedCheckpoint {
    pub tensors: TensorMap,
    pub metadata: ArchiveMetadata,
}

impl MergedCheckpoint {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        Ok(crate::tensorstore::write_archive(path, &self.tensors, &self.metadata)?)
    }
}

/// Offline merge of archives on disk.
pub fn merge(plan: &MergePlan, out: impl AsRef<Path>) -> Result<PathBuf> {
    plan.execute(out)
}

/// Sliding-window merger that follows a trajectory as it is written.
pub struct OnlineMerger {
    window: usize,
    strategy: Strategy,
    weights: MergeWeights<f64>,
    ring: VecDeque<CheckpointArchive>,
    tag: String,
}

impl OnlineMerger {
    pub fn new(window: usize, strategy: Strategy) -> Result<Self> {
        if window == 0 {
            return Err(MergeError::EmptyWindow);
        }
        let weights = strategy_weights::<f64>(&strategy, window - 1)?;
        Ok(OnlineMerger {
            window,
            tag: format!("online:{}:{window}", strategy.label()),
            strategy,
            weights,
            ring: VecDeque::with_capacity(window),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    /// Adds the newest checkpoint; returns a merge once the window is full.
    ///
    /// On error the window is left as it was.
    pub fn online_step(&mut self, path: impl AsRef<Path>) -> Result<Option<MergedCheckpoint>> {
        let archive = read_archive(path)?;
        if let Some(last) = self.ring.back() {
            check_pair(last, &archive)?;
            if archive.metadata().step <= last.metadata().step {
                return Err(MergeError::NotAscending {
                    path: archive.path().to_path_buf(),
                    step: archive.metadata().step,
                    previous: last.metadata().step,
                });
            }
        }
        if self.ring.len() == self.window {
            self.ring.pop_front();
        }
        self.ring.push_back(archive);
        if self.ring.len() < self.window {
            return Ok(None);
        }
        // Archives are immutable, so reopening gives the plan its own handles.
        let paths: Vec<PathBuf> = self.ring.iter().map(|a| a.path().to_path_buf()).collect();
        let plan = MergePlan::open(&paths, self.weights.clone(), self.tag.clone())?;
        plan.execute_in_memory().map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub max_abs_err: f64,
    /// `max_abs_err` over the largest magnitude in either reconstruction.
    pub max_rel_err: f64,
    pub window_steps: Vec<u64>,
    pub weights: MergeWeights<f64>,
    pub decay: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Sums the per-step updates recorded for one checkpoint interval.
fn interval_updates(archive: &CheckpointArchive) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    // Names are `param@step` with zero-padded steps, so iteration order is
    // step order within each parameter.
    for name in archive.tensors().keys() {
        let (param, _) = name.rsplit_once('@').ok_or_else(|| {
            MergeError::MissingUpdates(format!(
                "{}: tensor {name:?} is not a per-step update",
                archive.path().display()
            ))
        })?;
        let g = archive.read_tensor(name)?.to_f64_vec();
        match sums.get_mut(param) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
            None => {
                sums.insert(param.to_string(), g);
            }
        }
    }
    Ok(sums)
}

/// Checks `sum_j c_j theta_j == theta_n - sum_i w_i g_i` on the last
/// `weights.len()` checkpoints of a trajectory with recorded updates.
pub fn verify_identity(
    store: &Store,
    manifest: &TrajectoryManifest,
    weights: &MergeWeights<f64>,
) -> Result<IdentityReport> {
    if !manifest.records_updates {
        return Err(MergeError::MissingUpdates(
            "trajectory was recorded without --record-updates".into(),
        ));
    }
    let window = manifest.last_n(weights.len())?;
    if window.shortfall {
        return Err(MergeError::LengthMismatch {
            inputs: window.entries.len(),
            weights: weights.len(),
        });
    }
    let archives = window
        .entries
        .iter()
        .map(|e| store.open_entry(e))
        .collect::<Result<Vec<_>, _>>()?;
    let plan = MergePlan::new(archives, weights.clone(), "verify")?;
    let merged = plan.execute_in_memory()?;

    let decay = merge_to_decay(weights);
    let mut updates = Vec::with_capacity(decay.len());
    for entry in &window.entries[1..] {
        let rel = entry.updates.as_ref().ok_or_else(|| {
            MergeError::MissingUpdates(format!("step {} has no update record", entry.step))
        })?;
        updates.push(interval_updates(&read_archive(store.resolve(rel))?)?);
    }

    let base = &plan.inputs()[0];
    let (mut max_abs, mut scale) = (0.0f64, 0.0f64);
    for (name, tensor) in &merged.tensors {
        let theta_n = base.read_tensor(name)?.to_f64_vec();
        let per_interval = updates
            .iter()
            .map(|u| {
                u.get(name).cloned().ok_or_else(|| {
                    MergeError::MissingUpdates(format!("no updates recorded for {name:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rhs = reweighted_updates(&theta_n, &per_interval, decay.w());
        for (a, b) in tensor.to_f64_vec().iter().zip(&rhs) {
            max_abs = max_abs.max((a - b).abs());
            scale = scale.max(a.abs()).max(b.abs());
        }
    }
    let max_rel = if scale > 0.0 { max_abs / scale } else { max_abs };
    Ok(IdentityReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        window_steps: window.entries.iter().map(|e| e.step).collect(),
        weights: weights.clone(),
        decay: decay.into_inner(),
        tolerance: IDENTITY_TOLERANCE,
        passed: max_rel <= IDENTITY_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorstore::write_archive;
    use crate::weights::mean_weights;
    use num_rational::BigRational;

    fn scalar_archive(dir: &Path, name: &str, step: u64, values: Vec<f64>) -> PathBuf {
        let mut m = TensorMap::new();
        let n = values.len();
        m.insert("x".into(), Tensor::new(vec![n], values).unwrap());
        write_archive(dir.join(name), &m, &ArchiveMetadata::new(step, step, "")).unwrap()
    }

    fn value(path: &Path) -> Vec<f64> {
        read_archive(path).unwrap().read_tensor("x").unwrap().to_f64_vec()
    }

    #[test]
    fn midpoint() {
        let dir = tempfile::tempdir().unwrap();
        let a = scalar_archive(dir.path(), "a.wsmt", 1, vec![0.0]);
        let b = scalar_archive(dir.path(), "b.wsmt", 2, vec![1.0]);
        let plan = MergePlan::open(&[a, b], mean_weights(1), "t").unwrap();
        let out = merge(&plan, dir.path().join("m.wsmt")).unwrap();
        assert_eq!(value(&out), [0.5]);
        let archive = read_archive(&out).unwrap();
        assert_eq!(archive.metadata().step, 2);
        assert!(archive.metadata().provenance.is_some());
    }

    #[test]
    fn canonical_identity_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<_> = [0.0, -0.5, -0.75]
            .iter()
            .enumerate()
            .map(|(i, &v)| scalar_archive(dir.path(), &format!("{i}.wsmt"), i as u64, vec![v]))
            .collect();
        let plan = MergePlan::open(&paths, mean_weights(2), "t").unwrap();
        let merged = plan.execute_in_memory().unwrap().tensors["x"].to_f64_vec();
        let rhs = reweighted_updates(&[0.0], &[vec![0.5], vec![0.25]], &[2.0 / 3.0, 1.0 / 3.0]);
        assert!((merged[0] + 5.0 / 12.0).abs() <= 1e-15);
        assert!((merged[0] - rhs[0]).abs() <= 1e-15);
    }

    #[test]
    fn canonical_identity_is_exact_in_rationals() {
        let r = |n: i64, d: i64| BigRational::new(n.into(), d.into());
        let thetas = vec![vec![r(0, 1)], vec![r(-1, 2)], vec![r(-3, 4)]];
        let c = mean_weights::<BigRational>(2);
        let lhs = weighted_average(&thetas, c.c());
        let w = merge_to_decay(&c);
        assert_eq!(w.w(), &[r(2, 3), r(1, 3)]);
        let rhs = reweighted_updates(&thetas[0], &[vec![r(1, 2)], vec![r(1, 4)]], w.w());
        assert_eq!(lhs, rhs);
        assert_eq!(lhs[0], r(-5, 12));
    }

    #[test]
    fn last_only_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = scalar_archive(dir.path(), "a.wsmt", 1, vec![1.0, 2.0, 3.0]);
        let b = scalar_archive(dir.path(), "b.wsmt", 2, vec![-0.0, 1e-310, f64::MAX]);
        let w = MergeWeights::explicit(vec![0.0, 1.0]).unwrap();
        let plan = MergePlan::open(&[a, b.clone()], w, "").unwrap();
        let out = plan.execute(dir.path().join("m.wsmt")).unwrap();
        let got = value(&out);
        let want = value(&b);
        assert!(got.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn chunking_does_not_change_results() {
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<_> = (0..4)
            .map(|i| {
                let v: Vec<f64> = (0..1000).map(|j| ((i * 1000 + j) as f64).sin()).collect();
                scalar_archive(dir.path(), &format!("{i}.wsmt"), i, v)
            })
            .collect();
        let w = strategy_weights::<f64>(&"emulate:cosine".parse().unwrap(), 3).unwrap();
        let whole = MergePlan::open(&paths, w.clone(), "").unwrap().with_chunk(usize::MAX);
        let chunked = MergePlan::open(&paths, w, "").unwrap().with_chunk(7);
        assert_eq!(
            whole.execute_in_memory().unwrap(),
            chunked.execute_in_memory().unwrap()
        );
    }

    #[test]
    fn plan_validation() {
        let dir = tempfile::tempdir().unwrap();
        let a = scalar_archive(dir.path(), "a.wsmt", 5, vec![0.0]);
        let b = scalar_archive(dir.path(), "b.wsmt", 3, vec![1.0]);
        let c = scalar_archive(dir.path(), "c.wsmt", 9, vec![1.0, 2.0]);
        assert!(matches!(
            MergePlan::open(&[a.clone(), b.clone()], mean_weights(1), ""),
            Err(MergeError::NotAscending { step: 3, previous: 5, .. })
        ));
        assert!(matches!(
            MergePlan::open(std::slice::from_ref(&a), mean_weights(1), ""),
            Err(MergeError::LengthMismatch { inputs: 1, weights: 2 })
        ));
        assert!(matches!(
            MergePlan::open(&[a.clone(), c], mean_weights(1), ""),
            Err(MergeError::Store(StoreError::Incompatible { .. }))
        ));
        let missing = dir.path().join("nope.wsmt");
        match MergePlan::open(&[a, missing.clone()], mean_weights(1), "") {
            Err(MergeError::Store(StoreError::Io { path, .. })) => assert_eq!(path, missing),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn online_window() {
        let dir = tempfile::tempdir().unwrap();
        let mut merger = OnlineMerger::new(2, Strategy::Mean).unwrap();
        let a = scalar_archive(dir.path(), "a.wsmt", 1, vec![2.0]);
        let b = scalar_archive(dir.path(), "b.wsmt", 2, vec![4.0]);
        let c = scalar_archive(dir.path(), "c.wsmt", 3, vec![8.0]);
        assert!(merger.online_step(&a).unwrap().is_none());
        let m = merger.online_step(&b).unwrap().unwrap();
        assert_eq!(m.tensors["x"].to_f64_vec(), [3.0]);
        let m = merger.online_step(&c).unwrap().unwrap();
        assert_eq!(m.tensors["x"].to_f64_vec(), [6.0]);
        assert_eq!(merger.len(), 2);

        let bad = scalar_archive(dir.path(), "bad.wsmt", 4, vec![1.0, 1.0]);
        assert!(merger.online_step(&bad).is_err());
        assert_eq!(merger.len(), 2);

        let mut single = OnlineMerger::new(1, "emulate:one_minus_sqrt".parse().unwrap()).unwrap();
        let m = single.online_step(&c).unwrap().unwrap();
        assert_eq!(m.tensors["x"].to_f64_vec(), [8.0]);

        let mut four = OnlineMerger::new(4, Strategy::Mean).unwrap();
        for p in [&a, &b, &c] {
            assert!(four.online_step(p).unwrap().is_none());
        }
        assert!(OnlineMerger::new(0, Strategy::Mean).is_err());
    }

    #[test]
    fn reversal_is_a_relabeling() {
        let dir = tempfile::tempdir().unwrap();
        let fwd: Vec<_> = [1.0, 5.0, -2.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| scalar_archive(dir.path(), &format!("f{i}.wsmt"), i as u64, vec![v, v * 0.5]))
            .collect();
        let rev: Vec<_> = [-2.0, 5.0, 1.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| scalar_archive(dir.path(), &format!("r{i}.wsmt"), i as u64, vec![v, v * 0.5]))
            .collect();
        let w = MergeWeights::explicit(vec![0.2, 0.3, 0.5]).unwrap();
        let a = MergePlan::open(&fwd, w.clone(), "").unwrap().execute_in_memory().unwrap();
        let b = MergePlan::open(&rev, w.reversed(), "").unwrap().execute_in_memory().unwrap();
        let c = MergePlan::open(&rev, w, "").unwrap().execute_in_memory().unwrap();
        let xa = a.tensors["x"].to_f64_vec();
        let xb = b.tensors["x"].to_f64_vec();
        let xc = c.tensors["x"].to_f64_vec();
        assert!(xa.iter().zip(&xb).all(|(p, q)| (p - q).abs() <= 1e-15));
        assert!(xa.iter().zip(&xc).any(|(p, q)| (p - q).abs() > 1e-3));
    }

    #[test]
    fn f32_inputs_merge_in_f64_then_cast() {
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<_> = [0.1f32, 0.2, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut m = TensorMap::new();
                m.insert("x".into(), Tensor::new(vec![1], vec![v]).unwrap());
                write_archive(dir.path().join(format!("{i}.wsmt")), &m, &ArchiveMetadata::new(i as u64, 0, "")).unwrap()
            })
            .collect();
        let out = MergePlan::open(&paths, mean_weights(2), "").unwrap().execute_in_memory().unwrap();
        let wide = [f64::from(0.1f32), f64::from(0.2f32), f64::from(0.7f32)];
        let third = 1.0 / 3.0;
        let expected = weighted_sum(&[&wide[0..1], &wide[1..2], &wide[2..3]], &[third; 3])[0] as f32;
        assert_eq!(out.tensors["x"].as_slice::<f32>().unwrap(), &[expected]);
    }
}
