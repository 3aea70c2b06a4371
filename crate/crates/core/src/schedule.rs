//! Decay curves and live learning-rate schedules.
//!
//! A [`CurveSpec`] names a decay shape over `k` merge intervals. Sampling it
//! with [`discretize_curve`] yields a [`DecaySchedule`]: the multipliers
//! `w_1..w_k` that a weighted checkpoint merge applies to the updates that
//! followed the oldest checkpoint in the window. Curves are sampled at the
//! right endpoint of every interval, so `w_k` is exactly the requested
//! terminal ratio.
//!
//! [`lr_at`] evaluates the three live schedules the trainer uses: cosine
//! with warmup, warmup-stable-decay, and warmup-stable (no decay; merging
//! replaces it).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{Coefficient, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("invalid schedule config: {0}")]
    InvalidConfig(String),
    #[error("step {t} is past the end of the schedule ({max_steps})")]
    OutOfDomain { t: u64, max_steps: u64 },
    #[error("decay coefficient w_{index} = {value} {reason}")]
    InvalidDecay {
        index: usize,
        value: f64,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveFamily {
    Constant,
    Linear,
    Cosine,
    OneMinusSqrt,
    Exponential,
    Custom,
}

impl CurveFamily {
    pub fn name(self) -> &'static str {
        match self {
            CurveFamily::Constant => "constant",
            CurveFamily::Linear => "linear",
            CurveFamily::Cosine => "cosine",
            CurveFamily::OneMinusSqrt => "one_minus_sqrt",
            CurveFamily::Exponential => "exponential",
            CurveFamily::Custom => "custom",
        }
    }
}

impl fmt::Display for CurveFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurveFamily {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "constant" => CurveFamily::Constant,
            "linear" => CurveFamily::Linear,
            "cosine" => CurveFamily::Cosine,
            "one_minus_sqrt" | "1-sqrt" => CurveFamily::OneMinusSqrt,
            "exponential" => CurveFamily::Exponential,
            "custom" => CurveFamily::Custom,
            other => {
                return Err(ScheduleError::InvalidCurve(format!(
                    "unknown curve family {other:?}"
                )))
            }
        })
    }
}

/// A decay shape over `steps` merge intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub family: CurveFamily,
    pub steps: usize,
    #[serde(default)]
    pub end_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_points: Option<Vec<f64>>,
}

impl CurveSpec {
    pub fn new(family: CurveFamily, steps: usize, end_ratio: f64) -> Self {
        CurveSpec {
            family,
            steps,
            end_ratio,
            beta: None,
            custom_points: None,
        }
    }

    pub fn exponential(beta: f64, steps: usize) -> Self {
        CurveSpec {
            beta: Some(beta),
            ..CurveSpec::new(CurveFamily::Exponential, steps, 0.0)
        }
    }

    pub fn custom(points: Vec<f64>) -> Self {
        CurveSpec {
            custom_points: Some(points.clone()),
            ..CurveSpec::new(CurveFamily::Custom, points.len(), 0.0)
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.steps == 0 {
            return Err(ScheduleError::InvalidCurve("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.end_ratio) {
            return Err(ScheduleError::InvalidCurve(format!(
                "end_ratio {} outside [0, 1]",
                self.end_ratio
            )));
        }
        if self.family == CurveFamily::Exponential {
            match self.beta {
                Some(b) if b > 0.0 && b < 1.0 => {}
                Some(b) => {
                    return Err(ScheduleError::InvalidCurve(format!(
                        "beta {b} outside (0, 1)"
                    )))
                }
                None => {
                    return Err(ScheduleError::InvalidCurve(
                        "exponential family requires beta".into(),
                    ))
                }
            }
        }
        if self.family == CurveFamily::Custom {
            let points = self.custom_points.as_ref().ok_or_else(|| {
                ScheduleError::InvalidCurve("custom family requires custom_points".into())
            })?;
            if points.len() != self.steps {
                return Err(ScheduleError::InvalidCurve(format!(
                    "custom_points has {} values, steps is {}",
                    points.len(),
                    self.steps
                )));
            }
            // Full validation happens when the schedule is built.
            DecaySchedule::<f64>::new(points.clone())?;
        }
        Ok(())
    }

    /// Normalized multiplier at progress `p` in `[0, 1]`.
    ///
    /// Analytic families are continuous; exponential and custom curves are
    /// step functions that agree with [`discretize_curve`] at `p = i/k` and
    /// start from 1 at `p = 0`.
    pub fn profile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let r = self.end_ratio;
        let shape = match self.family {
            CurveFamily::Constant => 1.0,
            CurveFamily::Linear => 1.0 - p,
            CurveFamily::Cosine => 0.5 * (1.0 + (PI * p).cos()),
            CurveFamily::OneMinusSqrt => 1.0 - p.sqrt(),
            CurveFamily::Exponential | CurveFamily::Custom => {
                let i = (p * self.steps as f64).ceil() as usize;
                if i == 0 {
                    return 1.0;
                }
                let i = i.min(self.steps);
                return match discretize_curve::<f64>(self) {
                    Ok(s) => s.w()[i - 1],
                    Err(_) => f64::NAN,
                };
            }
        };
        shape * (1.0 - r) + r
    }
}

/// Gradient decay coefficients `w_1..w_k` with `1 >= w_1 >= ... >= w_k >= 0`.
///
/// `k = 0` is allowed; it is the schedule of a single-checkpoint window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySchedule<T> {
    w: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<CurveSpec>,
}

impl<T: Coefficient> DecaySchedule<T> {
    /// Validates and normalizes a coefficient sequence.
    ///
    /// Violations within `T::tolerance()` are clamped to ties; anything larger
    /// reports the first offending index (1-based, matching `w_i`).
    pub fn new(mut w: Vec<T>) -> Result<Self, ScheduleError> {
        let tol = T::tolerance();
        let one = T::one();
        let zero = T::zero();
        let bad = |index: usize, v: &T, reason| ScheduleError::InvalidDecay {
            index,
            value: v.approx_f64(),
            reason,
        };
        for (i, v) in w.iter().enumerate() {
            // NaN compares false both ways.
            if !(v.clone() <= one.clone() + tol.clone() && v.clone() >= zero.clone() - tol.clone()) {
                return Err(bad(i + 1, v, "is outside [0, 1]"));
            }
        }
        if let Some(first) = w.first_mut() {
            if *first > one {
                *first = one.clone();
            }
        }
        for i in 1..w.len() {
            if w[i] > w[i - 1] {
                if w[i].clone() - w[i - 1].clone() > tol {
                    return Err(bad(i + 1, &w[i], "exceeds its predecessor"));
                }
                w[i] = w[i - 1].clone();
            }
        }
        // Negative values within tolerance become exact zeros.
        for v in w.iter_mut() {
            if *v < zero {
                *v = zero.clone();
            }
        }
        Ok(DecaySchedule { w, spec: None })
    }

    pub fn with_spec(mut self, spec: CurveSpec) -> Self {
        self.spec = Some(spec);
        self
    }

    pub fn w(&self) -> &[T] {
        &self.w
    }

    pub fn into_inner(self) -> Vec<T> {
        self.w
    }

    pub fn spec(&self) -> Option<&CurveSpec> {
        self.spec.as_ref()
    }

    /// Number of merge intervals `k`.
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Samples a curve at the right endpoint of each of its `k` intervals.
pub fn discretize_curve<T: Real>(spec: &CurveSpec) -> Result<DecaySchedule<T>, ScheduleError> {
    spec.validate()?;
    let k = spec.steps;
    let r = T::lit(spec.end_ratio);
    let rescale = |f: T| f * (T::one() - r) + r;
    let w: Vec<T> = match spec.family {
        CurveFamily::Custom => spec
            .custom_points
            .as_ref()
            .expect("validated")
            .iter()
            .map(|&v| T::lit(v))
            .collect(),
        CurveFamily::Exponential => {
            let beta = T::lit(spec.beta.expect("validated"));
            ema_to_decay::<T>(beta, k)?
                .into_inner()
                .into_iter()
                .map(rescale)
                .collect()
        }
        family => (1..=k)
            .map(|i| {
                let x = T::lit(i as f64) / T::lit(k as f64);
                let f = match family {
                    CurveFamily::Constant => T::one(),
                    CurveFamily::Linear => T::one() - x,
                    CurveFamily::Cosine => {
                        // Exact endpoint: cos(pi) rounds away from -1 otherwise.
                        if i == k {
                            T::zero()
                        } else {
                            T::lit(0.5) * (T::one() + (T::lit(PI) * x).cos())
                        }
                    }
                    CurveFamily::OneMinusSqrt => T::one() - x.sqrt(),
                    _ => unreachable!(),
                };
                rescale(f)
            })
            .collect(),
    };
    Ok(DecaySchedule::new(w)?.with_spec(spec.clone()))
}

/// Decay image of EMA merging: `w_i = 1 - beta^(k - i + 1)`.
///
/// The matching checkpoint weights are `c_0 = beta^k` and
/// `c_j = (1 - beta) * beta^(k - j)`.
pub fn ema_to_decay<T: Real>(beta: T, k: usize) -> Result<DecaySchedule<T>, ScheduleError> {
    if !(beta > T::zero() && beta < T::one()) {
        return Err(ScheduleError::InvalidCurve(format!(
            "beta {beta} outside (0, 1)"
        )));
    }
    let w = (1..=k)
        .map(|i| T::one() - beta.powi((k - i + 1) as i32))
        .collect();
    let spec = CurveSpec::exponential(beta.approx_f64(), k.max(1));
    Ok(DecaySchedule::new(w)?.with_spec(spec))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Wsd,
    Wsm,
}

impl FromStr for ScheduleKind {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "wsd" => Ok(ScheduleKind::Wsd),
            "wsm" => Ok(ScheduleKind::Wsm),
            other => Err(ScheduleError::InvalidConfig(format!(
                "unknown schedule {other:?}"
            ))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Wsd => "wsd",
            ScheduleKind::Wsm => "wsm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrScheduleConfig {
    pub lr_peak: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    /// Required by cosine and wsd.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    /// wsd only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_start: Option<u64>,
    /// wsd only; `steps` is ignored, the curve is stretched over the decay span.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_curve: Option<CurveSpec>,
}

impl LrScheduleConfig {
    pub fn constant(lr_peak: f64, warmup_steps: u64) -> Self {
        LrScheduleConfig {
            lr_peak,
            warmup_steps,
            max_steps: None,
            decay_start: None,
            decay_curve: None,
        }
    }

    pub fn validate(&self, kind: ScheduleKind) -> Result<(), ScheduleError> {
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(ScheduleError::InvalidConfig(format!(
                "lr_peak must be positive, got {}",
                self.lr_peak
            )));
        }
        if kind == ScheduleKind::Wsm {
            return Ok(());
        }
        let max = self.max_steps.ok_or_else(|| {
            ScheduleError::InvalidConfig(format!("{kind} schedule requires max_steps"))
        })?;
        if max == 0 || self.warmup_steps > max {
            return Err(ScheduleError::InvalidConfig(format!(
                "need 0 < warmup_steps ({}) <= max_steps ({max})",
                self.warmup_steps
            )));
        }
        if kind == ScheduleKind::Wsd {
            let start = self.decay_start.ok_or_else(|| {
                ScheduleError::InvalidConfig("wsd schedule requires decay_start".into())
            })?;
            if start < self.warmup_steps || start > max {
                return Err(ScheduleError::InvalidConfig(format!(
                    "need warmup_steps <= decay_start ({start}) <= max_steps"
                )));
            }
            self.decay_curve
                .as_ref()
                .ok_or_else(|| ScheduleError::InvalidConfig("wsd requires decay_curve".into()))?
                .validate()?;
        }
        Ok(())
    }
}

/// Learning rate at step `t`.
pub fn lr_at(config: &LrScheduleConfig, kind: ScheduleKind, t: u64) -> Result<f64, ScheduleError> {
    config.validate(kind)?;
    let peak = config.lr_peak;
    let warmup = config.warmup_steps;
    if kind != ScheduleKind::Wsm {
        let max = config.max_steps.expect("validated");
        if t > max {
            return Err(ScheduleError::OutOfDomain { t, max_steps: max });
        }
    }
    if t < warmup {
        return Ok(peak * t as f64 / warmup as f64);
    }
    let progress = |start: u64, end: u64| {
        if end == start {
            0.0
        } else {
            (t - start) as f64 / (end - start) as f64
        }
    };
    Ok(match kind {
        ScheduleKind::Wsm => peak,
        ScheduleKind::Cosine => {
            let p = progress(warmup, config.max_steps.expect("validated"));
            0.5 * peak * (1.0 + (PI * p).cos())
        }
        ScheduleKind::Wsd => {
            let start = config.decay_start.expect("validated");
            if t < start {
                peak
            } else {
                let p = progress(start, config.max_steps.expect("validated"));
                peak * config.decay_curve.as_ref().expect("validated").profile(p)
            }
        }
    })
}
