//! The two-way map between decay coefficients and checkpoint merge weights.
//!
//! Merging checkpoints `theta_n..theta_{n+k}` with weights `c_0..c_k` is the
//! same as starting from `theta_n` and applying the `k` later updates scaled
//! by `w_i = c_i + ... + c_k`. [`merge_to_decay`] takes suffix sums;
//! [`decay_to_merge`] inverts them with `c_k = w_k`, `c_j = w_j - w_{j+1}`
//! and `c_0 = 1 - w_1`. Both directions are generic over [`Coefficient`], so
//! the same code runs in `f64` and in exact rationals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{Coefficient, Real};
use crate::schedule::{discretize_curve, CurveFamily, CurveSpec, DecaySchedule, ScheduleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("merge weight c_{index} = {value} is negative")]
    Negative { index: usize, value: f64 },
    #[error("merge weights sum to {sum}, expected 1")]
    BadSum { sum: f64 },
    #[error("merge weights are empty")]
    Empty,
    #[error("curve has {found} steps but the window needs {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid strategy {0:?}")]
    BadStrategy(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Where a weight vector came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeSource {
    Mean,
    Ema { beta: f64 },
    Emulated { curve: CurveSpec },
    Explicit,
}

/// Convex weights `c_0..c_k`, positionally aligned oldest to newest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeWeights<T> {
    c: Vec<T>,
    source: MergeSource,
}

impl<T: Coefficient> MergeWeights<T> {
    pub fn new(c: Vec<T>, source: MergeSource) -> Result<Self, WeightError> {
        if c.is_empty() {
            return Err(WeightError::Empty);
        }
        let zero = T::zero();
        for (index, v) in c.iter().enumerate() {
            if !(v.clone() >= zero) {
                return Err(WeightError::Negative {
                    index,
                    value: v.approx_f64(),
                });
            }
        }
        let sum = c.iter().cloned().fold(T::zero(), |a, b| a + b);
        let dev = if sum > T::one() {
            sum.clone() - T::one()
        } else {
            T::one() - sum.clone()
        };
        if dev > T::tolerance() {
            return Err(WeightError::BadSum {
                sum: sum.approx_f64(),
            });
        }
        Ok(MergeWeights { c, source })
    }

    pub fn explicit(c: Vec<T>) -> Result<Self, WeightError> {
        Self::new(c, MergeSource::Explicit)
    }

    pub fn c(&self) -> &[T] {
        &self.c
    }

    pub fn source(&self) -> &MergeSource {
        &self.source
    }

    /// Number of checkpoints the weights cover (`k + 1`).
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn reversed(&self) -> Self {
        let mut c = self.c.clone();
        c.reverse();
        MergeWeights {
            c,
            source: MergeSource::Explicit,
        }
    }

    pub fn to_f64(&self) -> MergeWeights<f64> {
        MergeWeights {
            c: self.c.iter().map(Coefficient::approx_f64).collect(),
            source: self.source.clone(),
        }
    }
}

/// Checkpoint weights that realize a decay schedule.
pub fn decay_to_merge<T: Coefficient>(schedule: &DecaySchedule<T>) -> MergeWeights<T> {
    let w = schedule.w();
    let k = w.len();
    let mut c = Vec::with_capacity(k + 1);
    c.push(match w.first() {
        Some(w1) => T::one() - w1.clone(),
        None => T::one(),
    });
    for j in 1..k {
        c.push(w[j - 1].clone() - w[j].clone());
    }
    if let Some(wk) = w.last() {
        c.push(wk.clone());
    }
    let source = match schedule.spec() {
        Some(spec) if spec.family == CurveFamily::Exponential => MergeSource::Ema {
            beta: spec.beta.unwrap_or(f64::NAN),
        },
        Some(spec) => MergeSource::Emulated { curve: spec.clone() },
        None => MergeSource::Explicit,
    };
    MergeWeights { c, source }
}

/// Decay coefficients implied by a weight vector: `w_i = sum_{j >= i} c_j`.
pub fn merge_to_decay<T: Coefficient>(weights: &MergeWeights<T>) -> DecaySchedule<T> {
    let c = weights.c();
    let mut w = vec![T::zero(); c.len() - 1];
    let mut acc = T::zero();
    for i in (1..c.len()).rev() {
        acc = acc + c[i].clone();
        w[i - 1] = acc.clone();
    }
    // Suffix sums of non-negative weights are monotone; only a rounding
    // overshoot of w_1 past 1 can need clamping.
    DecaySchedule::new(w).expect("suffix sums of valid weights form a valid schedule")
}

/// Uniform weights `c_j = 1/(k+1)`.
pub fn mean_weights<T: Coefficient>(k: usize) -> MergeWeights<T> {
    let n = T::from_f64_lossy((k + 1) as f64);
    let each = T::one() / n;
    MergeWeights {
        c: vec![each; k + 1],
        source: MergeSource::Mean,
    }
}

/// The linear decay that uniform merging realizes: `w_i = (k - i + 1)/(k + 1)`.
///
/// Note this differs from the `linear` curve family, which reaches 0 at `w_k`.
pub fn uniform_decay<T: Coefficient>(k: usize) -> DecaySchedule<T> {
    let n = T::from_f64_lossy((k + 1) as f64);
    let w = (1..=k)
        .map(|i| T::from_f64_lossy((k - i + 1) as f64) / n.clone())
        .collect();
    DecaySchedule::new(w).expect("uniform decay is monotone")
}

/// EMA weights `c_0 = beta^k`, `c_j = (1 - beta) beta^(k - j)`.
pub fn ema_weights<T: Real>(beta: T, k: usize) -> Result<MergeWeights<T>, WeightError> {
    if !(beta > T::zero() && beta < T::one()) {
        return Err(ScheduleError::InvalidCurve(format!("beta {beta} outside (0, 1)")).into());
    }
    let mut c = Vec::with_capacity(k + 1);
    c.push(beta.powi(k as i32));
    c.extend((1..=k).map(|j| (T::one() - beta) * beta.powi((k - j) as i32)));
    Ok(MergeWeights {
        c,
        source: MergeSource::Ema {
            beta: beta.approx_f64(),
        },
    })
}

/// A named merge strategy.
///
/// Text form: `mean`, `ema:BETA`, `emulate:FAMILY[@END_RATIO]` (curve sized to
/// the window), or `emulate:{CurveSpec JSON}` (fixed number of steps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    Mean,
    Ema { beta: f64 },
    Emulate(CurveSpec),
    EmulateShape { family: CurveFamily, end_ratio: f64 },
}

impl Strategy {
    /// The curve this strategy emulates over a window of `k` intervals.
    pub fn curve_for(&self, k: usize) -> Option<CurveSpec> {
        match self {
            Strategy::Emulate(spec) => Some(spec.clone()),
            Strategy::EmulateShape { family, end_ratio } => {
                Some(CurveSpec::new(*family, k, *end_ratio))
            }
            _ => None,
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self {
            Strategy::Mean => "mean".into(),
            Strategy::Ema { beta } => format!("ema:{beta}"),
            Strategy::Emulate(spec) => format!("emulate:{}/{}", spec.family, spec.steps),
            Strategy::EmulateShape { family, end_ratio } if *end_ratio == 0.0 => {
                format!("emulate:{family}")
            }
            Strategy::EmulateShape { family, end_ratio } => format!("emulate:{family}@{end_ratio}"),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Emulate(spec) => write!(
                f,
                "emulate:{}",
                serde_json::to_string(spec).map_err(|_| fmt::Error)?
            ),
            other => f.write_str(&other.label()),
        }
    }
}

impl FromStr for Strategy {
    type Err = WeightError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "mean" {
            return Ok(Strategy::Mean);
        }
        if let Some(beta) = s.strip_prefix("ema:") {
            let beta: f64 = beta
                .parse()
                .map_err(|_| WeightError::BadStrategy(s.to_string()))?;
            if !(beta > 0.0 && beta < 1.0) {
                return Err(WeightError::BadStrategy(s.to_string()));
            }
            return Ok(Strategy::Ema { beta });
        }
        if let Some(curve) = s.strip_prefix("emulate:") {
            if curve.starts_with('{') {
                let spec: CurveSpec = serde_json::from_str(curve)
                    .map_err(|e| WeightError::BadStrategy(format!("{s}: {e}")))?;
                spec.validate()?;
                return Ok(Strategy::Emulate(spec));
            }
            let (family, end_ratio) = match curve.split_once('@') {
                Some((f, r)) => (
                    f,
                    r.parse::<f64>()
                        .map_err(|_| WeightError::BadStrategy(s.to_string()))?,
                ),
                None => (curve, 0.0),
            };
            let family: CurveFamily = family.parse()?;
            if matches!(family, CurveFamily::Exponential | CurveFamily::Custom) {
                return Err(WeightError::BadStrategy(format!(
                    "{s}: {family} curves need a full JSON spec"
                )));
            }
            CurveSpec::new(family, 1, end_ratio).validate()?;
            return Ok(Strategy::EmulateShape { family, end_ratio });
        }
        Err(WeightError::BadStrategy(s.to_string()))
    }
}

impl TryFrom<String> for Strategy {
    type Error = WeightError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.to_string()
    }
}

/// Merge weights for a window of `k + 1` checkpoints.
pub fn strategy_weights<T: Real>(strategy: &Strategy, k: usize) -> Result<MergeWeights<T>, WeightError> {
    match strategy {
        Strategy::Mean => Ok(mean_weights(k)),
        Strategy::Ema { beta } => ema_weights(T::lit(*beta), k),
        Strategy::EmulateShape { .. } if k == 0 => MergeWeights::new(
            vec![T::one()],
            MergeSource::Emulated {
                curve: strategy.curve_for(0).expect("emulating strategy"),
            },
        ),
        Strategy::Emulate(_) | Strategy::EmulateShape { .. } => {
            let spec = strategy.curve_for(k).expect("emulating strategy");
            if spec.steps != k {
                return Err(WeightError::DimensionMismatch {
                    expected: k,
                    found: spec.steps,
                });
            }
            Ok(decay_to_merge(&discretize_curve::<T>(&spec)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ema_to_decay;
    use num_rational::BigRational;
    use proptest::prelude::{prop, prop_assert, prop_assume, proptest};
    use proptest::strategy::Strategy as PropStrategy;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn sched(w: &[f64]) -> DecaySchedule<f64> {
        DecaySchedule::new(w.to_vec()).unwrap()
    }

    #[test]
    fn full_lr_keeps_latest() {
        assert_eq!(decay_to_merge(&sched(&[1.0, 1.0, 1.0])).c(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_quarter_steps_are_uniform() {
        assert_eq!(
            decay_to_merge(&sched(&[0.75, 0.5, 0.25])).c(),
            &[0.25, 0.25, 0.25, 0.25]
        );
    }

    #[test]
    fn cosine_two_steps() {
        let c = decay_to_merge(&sched(&[0.5, 0.0]));
        assert_eq!(c.c(), &[0.5, 0.5, 0.0]);
        assert_eq!(merge_to_decay(&c).w(), &[0.5, 0.0]);
    }

    #[test]
    fn single_interval() {
        let c = decay_to_merge(&sched(&[0.3]));
        assert!(close(c.c(), &[0.7, 0.3], 1e-15));
        assert_eq!(decay_to_merge(&sched(&[])).c(), &[1.0]);
    }

    #[test]
    fn suffix_sums() {
        let mut c = vec![0.0; 5];
        c[0] = 1.0;
        let w = merge_to_decay(&MergeWeights::explicit(c).unwrap());
        assert_eq!(w.w(), &[0.0; 4]);
        let w = merge_to_decay(&mean_weights::<f64>(3));
        assert_eq!(w.w(), &[0.75, 0.5, 0.25]);
    }

    #[test]
    fn ema_suffix_sums_follow_geometric_series() {
        for beta in [0.1f64, 0.5, 0.9, 0.99] {
            for k in [1usize, 2, 5, 17] {
                let c = ema_weights(beta, k).unwrap();
                let w = merge_to_decay(&c);
                let oracle: Vec<f64> = (1..=k).map(|i| 1.0 - beta.powi((k - i + 1) as i32)).collect();
                assert!(close(w.w(), &oracle, 1e-12), "beta={beta} k={k}");
                assert!(close(w.w(), ema_to_decay(beta, k).unwrap().w(), 1e-12));
                // And back again.
                let back = decay_to_merge(&ema_to_decay(beta, k).unwrap());
                assert!(close(back.c(), c.c(), 1e-12));
            }
        }
    }

    #[test]
    fn strategies() {
        assert_eq!(
            strategy_weights::<f64>(&Strategy::Mean, 3).unwrap().c(),
            &[0.25, 0.25, 0.25, 0.25]
        );
        assert_eq!(
            strategy_weights::<f64>(&Strategy::Ema { beta: 0.5 }, 2).unwrap().c(),
            &[0.25, 0.25, 0.5]
        );
        let spec = CurveSpec::new(CurveFamily::OneMinusSqrt, 4, 0.0);
        let c = strategy_weights::<f64>(&Strategy::Emulate(spec.clone()), 4).unwrap();
        assert!(close(
            c.c(),
            &[0.5, 0.207_106_781_186_547_5, 0.158_918_622_597_891, 0.133_974_596_215_561_35, 0.0],
            1e-12
        ));
        assert_eq!(
            strategy_weights::<f64>(&Strategy::Emulate(spec), 3).unwrap_err(),
            WeightError::DimensionMismatch { expected: 3, found: 4 }
        );
        let shaped: Strategy = "emulate:one_minus_sqrt".parse().unwrap();
        assert_eq!(strategy_weights::<f64>(&shaped, 4).unwrap().c(), c.c());
    }

    #[test]
    fn strategy_text_round_trip() {
        for s in [
            "mean",
            "ema:0.9",
            "emulate:cosine",
            "emulate:linear@0.1",
            r#"emulate:{"family":"cosine","steps":4,"end_ratio":0.0}"#,
        ] {
            let parsed: Strategy = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
        for bad in ["median", "ema:1.5", "ema:x", "emulate:exponential", "emulate:{"] {
            assert!(bad.parse::<Strategy>().is_err(), "{bad}");
        }
    }

    #[test]
    fn invalid_weights_are_rejected() {
        assert!(matches!(
            MergeWeights::explicit(vec![0.5, -0.1, 0.6]),
            Err(WeightError::Negative { index: 1, .. })
        ));
        assert!(matches!(
            MergeWeights::explicit(vec![0.5, 0.4]),
            Err(WeightError::BadSum { .. })
        ));
        assert!(MergeWeights::<f64>::explicit(vec![]).is_err());
    }

    #[test]
    fn exact_rational_round_trip() {
        let r = |n: i64, d: i64| BigRational::new(n.into(), d.into());
        let w = DecaySchedule::new(vec![r(2, 3), r(1, 3)]).unwrap();
        let c = decay_to_merge(&w);
        assert_eq!(c.c(), &[r(1, 3), r(1, 3), r(1, 3)]);
        assert_eq!(merge_to_decay(&c), w);
        assert_eq!(mean_weights::<BigRational>(2).c(), c.c());
        assert_eq!(uniform_decay::<BigRational>(2).w(), w.w());
    }

    fn monotone_w() -> impl PropStrategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..=1.0, 1..=64).prop_map(|mut v| {
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v
        })
    }

    proptest! {
        #[test]
        fn decay_round_trip(w in monotone_w()) {
            let s = sched(&w);
            let c = decay_to_merge(&s);
            prop_assert!(c.c().iter().all(|&x| x >= 0.0));
            prop_assert!((c.c().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(close(merge_to_decay(&c).w(), &w, 1e-12));
        }

        #[test]
        fn merge_round_trip(raw in prop::collection::vec(0.0f64..1.0, 1..=65)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-3);
            let c: Vec<f64> = raw.iter().map(|x| x / total).collect();
            prop_assume!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-13);
            let weights = MergeWeights::explicit(c.clone()).unwrap();
            let back = decay_to_merge(&merge_to_decay(&weights));
            prop_assert!(close(back.c(), &c, 1e-12));
        }

        #[test]
        fn non_monotone_input_is_rejected(w in monotone_w(), at in 0usize..64, bump in 1e-9f64..0.5) {
            prop_assume!(w.len() >= 2);
            let at = 1 + at % (w.len() - 1);
            let mut bad = w.clone();
            bad[at] = w[at - 1] + bump;
            prop_assume!(bad[at] <= 1.0);
            let err = DecaySchedule::new(bad).unwrap_err();
            let is_bad_index = matches!(err, ScheduleError::InvalidDecay { index, .. } if index == at + 1);
            prop_assert!(is_bad_index);
        }
    }
}
