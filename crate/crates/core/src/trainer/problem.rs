//! Small differentiable problems with a base and an annealing distribution.
//!
//! Every problem draws training samples from one of two synthetic
//! distributions. The annealing distribution has lower noise and a shifted
//! optimum, standing in for a smaller, cleaner dataset introduced late in
//! training. Evaluation uses a fixed sample drawn from `eval_seed`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::tensorstore::{Tensor, TensorMap};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    QuadraticBowl,
    LinearRegression,
    LogisticRegression,
    Mlp,
}

impl FromStr for ProblemKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "quadratic" | "quadratic_bowl" => ProblemKind::QuadraticBowl,
            "linear" | "linear_regression" => ProblemKind::LinearRegression,
            "logistic" | "logistic_regression" => ProblemKind::LogisticRegression,
            "mlp" => ProblemKind::Mlp,
            other => return Err(TrainError::Config(format!("unknown problem {other:?}"))),
        })
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProblemKind::QuadraticBowl => "quadratic_bowl",
            ProblemKind::LinearRegression => "linear_regression",
            ProblemKind::LogisticRegression => "logistic_regression",
            ProblemKind::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Base,
    Anneal,
}

fn default_dim() -> usize {
    64
}
fn default_hidden() -> usize {
    16
}
fn default_noise() -> f64 {
    1.0
}
fn default_batch() -> usize {
    1
}
fn default_condition() -> f64 {
    100.0
}
fn default_eval_samples() -> usize {
    4096
}
fn default_anneal_noise() -> f64 {
    0.25
}
fn default_anneal_shift() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Parameter dimension (input dimension for the MLP).
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// MLP hidden width.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Sample noise: optimum jitter for the quadratic, label noise otherwise.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Ratio of largest to smallest curvature of the quadratic.
    #[serde(default = "default_condition")]
    pub condition: f64,
    /// Seeds the problem instance (optimum, teacher), not the training run.
    #[serde(default)]
    pub instance_seed: u64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Distribution used by evaluation.
    #[serde(default)]
    pub data_source: DataSource,
    #[serde(default = "default_anneal_noise")]
    pub anneal_noise_factor: f64,
    #[serde(default = "default_anneal_shift")]
    pub anneal_shift: f64,
}

impl ProblemConfig {
    pub fn new(kind: ProblemKind) -> Self {
        ProblemConfig {
            kind,
            dim: default_dim(),
            hidden: default_hidden(),
            noise_scale: default_noise(),
            batch_size: if kind == ProblemKind::QuadraticBowl { 1 } else { 8 },
            condition: default_condition(),
            instance_seed: 0,
            eval_samples: default_eval_samples(),
            data_source: DataSource::Base,
            anneal_noise_factor: default_anneal_noise(),
            anneal_shift: default_anneal_shift(),
        }
    }

    pub fn quadratic(dim: usize, noise_scale: f64) -> Self {
        ProblemConfig {
            dim,
            noise_scale,
            ..ProblemConfig::new(ProblemKind::QuadraticBowl)
        }
    }

    /// Step size for plain SGD at the edge of the stable regime.
    pub fn default_lr(&self) -> f64 {
        match self.kind {
            // 1 / lambda_max
            ProblemKind::QuadraticBowl => 1.0,
            ProblemKind::LinearRegression => 0.05,
            ProblemKind::LogisticRegression => 0.5,
            ProblemKind::Mlp => 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.kind == ProblemKind::Mlp && self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale {} must be >= 0", self.noise_scale));
        }
        if !(self.condition >= 1.0) {
            return bad(format!("condition {} must be >= 1", self.condition));
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be positive".into());
        }
        Ok(())
    }

    pub fn build<T: Real>(&self) -> Result<Box<dyn Objective<T>>, TrainError> {
        self.validate()?;
        Ok(match self.kind {
            ProblemKind::QuadraticBowl => Box::new(Quadratic::new(self)),
            ProblemKind::LinearRegression => Box::new(Regression::new(self, false)),
            ProblemKind::LogisticRegression => Box::new(Regression::new(self, true)),
            ProblemKind::Mlp => Box::new(Mlp::new(self)),
        })
    }
}

/// Named parameter blocks laid out contiguously in name order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<(String, Vec<usize>)>,
}

impl ParamLayout {
    pub fn new(mut blocks: Vec<(String, Vec<usize>)>) -> Self {
        blocks.sort_by(|a, b| a.0.cmp(&b.0));
        ParamLayout { blocks }
    }

    pub fn total(&self) -> usize {
        self.blocks.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn blocks(&self) -> &[(String, Vec<usize>)] {
        &self.blocks
    }

    /// `(name, shape, flat range)` for every block.
    pub fn ranges(&self) -> impl Iterator<Item = (&str, &[usize], std::ops::Range<usize>)> {
        let mut start = 0;
        self.blocks.iter().map(move |(name, shape)| {
            let n: usize = shape.iter().product();
            let r = start..start + n;
            start += n;
            (name.as_str(), shape.as_slice(), r)
        })
    }

    pub fn to_tensors<T: Real>(&self, flat: &[T]) -> TensorMap {
        self.ranges()
            .map(|(name, shape, r)| {
                let t = Tensor::new(shape.to_vec(), flat[r].to_vec()).expect("layout matches");
                (name.to_string(), t)
            })
            .collect()
    }

    /// Flattens archive tensors; every block must be present with its shape.
    pub fn from_tensors<T: Real>(&self, tensors: &TensorMap) -> Result<Vec<T>, TrainError> {
        if tensors.len() != self.blocks.len() {
            return Err(TrainError::Shape(format!(
                "expected tensors {:?}, found {:?}",
                self.blocks.iter().map(|b| &b.0).collect::<Vec<_>>(),
                tensors.keys().collect::<Vec<_>>()
            )));
        }
        let mut flat = Vec::with_capacity(self.total());
        for (name, shape, _) in self.ranges() {
            let t = tensors
                .get(name)
                .ok_or_else(|| TrainError::Shape(format!("missing tensor {name:?}")))?;
            if t.shape() != shape {
                return Err(TrainError::Shape(format!(
                    "{name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            flat.extend(t.to_f64_vec().into_iter().map(T::lit));
        }
        Ok(flat)
    }
}

/// A stochastic objective over a flat parameter vector.
pub trait Objective<T: Real>: Send + Sync {
    fn layout(&self) -> &ParamLayout;

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<T>;

    /// Minibatch loss at `theta`; writes the minibatch gradient into `grad`.
    fn sample_grad(&self, theta: &[T], source: DataSource, rng: &mut ChaCha8Rng, grad: &mut [T]) -> T;

    /// Mean loss over the fixed evaluation sample drawn from `eval_seed`.
    fn eval_loss(&self, theta: &[T], source: DataSource, eval_seed: u64) -> T;
}

pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn instance_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn eval_rng(eval_seed: u64, source: DataSource) -> ChaCha8Rng {
    instance_rng(eval_seed, 100 + source as u64)
}

/// `0.5 (theta - x)^T A (theta - x)` with diagonal `A` and `x ~ N(opt, sigma^2 I)`.
struct Quadratic {
    layout: ParamLayout,
    curvature: Vec<f64>,
    optimum: [Vec<f64>; 2],
    sigma: [f64; 2],
    batch: usize,
    eval_samples: usize,
}

impl Quadratic {
    fn new(cfg: &ProblemConfig) -> Self {
        let d = cfg.dim;
        let curvature = (0..d)
            .map(|i| {
                if d == 1 {
                    1.0
                } else {
                    cfg.condition.powf(-(i as f64) / (d - 1) as f64)
                }
            })
            .collect();
        let mut rng = instance_rng(cfg.instance_seed, 1);
        let shift = normals(&mut rng, d, cfg.anneal_shift);
        Quadratic {
            layout: ParamLayout::new(vec![("theta".into(), vec![d])]),
            curvature,
            optimum: [vec![0.0; d], shift],
            sigma: [cfg.noise_scale, cfg.noise_scale * cfg.anneal_noise_factor],
            batch: cfg.batch_size,
            eval_samples: cfg.eval_samples,
        }
    }
}

impl<T: Real> Objective<T> for Quadratic {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<T> {
        normals(rng, self.curvature.len(), 1.0).into_iter().map(T::lit).collect()
    }

    fn sample_grad(&self, theta: &[T], source: DataSource, rng: &mut ChaCha8Rng, grad: &mut [T]) -> T {
        let s = source as usize;
        let d = theta.len();
        let mut mean = vec![0.0; d];
        let mut loss = 0.0;
        for _ in 0..self.batch {
            for i in 0..d {
                let x = self.optimum[s][i] + self.sigma[s] * normal(rng);
                mean[i] += x;
                let r = theta[i].approx_f64() - x;
                loss += 0.5 * self.curvature[i] * r * r;
            }
        }
        let b = self.batch as f64;
        for i in 0..d {
            let x_bar = T::lit(mean[i] / b);
            grad[i] = T::lit(self.curvature[i]) * (theta[i] - x_bar);
        }
        T::lit(loss / b)
    }

    fn eval_loss(&self, theta: &[T], source: DataSource, eval_seed: u64) -> T {
        let s = source as usize;
        let mut rng = eval_rng(eval_seed, source);
        let mut total = T::zero();
        for _ in 0..self.eval_samples {
            let mut sample = T::zero();
            for (i, &t) in theta.iter().enumerate() {
                let x = T::lit(self.optimum[s][i] + self.sigma[s] * normal(&mut rng));
                let r = t - x;
                sample = sample + T::lit(0.5 * self.curvature[i]) * r * r;
            }
            total = total + sample;
        }
        total / T::lit(self.eval_samples as f64)
    }
}

/// Linear (squared loss) or logistic regression with Gaussian inputs.
struct Regression {
    layout: ParamLayout,
    dim: usize,
    logistic: bool,
    truth: [Vec<f64>; 2],
    noise: [f64; 2],
    batch: usize,
    eval_samples: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus<T: Real>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Regression {
    fn new(cfg: &ProblemConfig, logistic: bool) -> Self {
        let d = cfg.dim;
        let mut rng = instance_rng(cfg.instance_seed, 2);
        let scale = if logistic { 2.0 } else { 1.0 } / (d as f64).sqrt();
        let base = normals(&mut rng, d, scale);
        let delta = normals(&mut rng, d, cfg.anneal_shift / (d as f64).sqrt());
        let anneal = base.iter().zip(&delta).map(|(b, s)| b + s).collect();
        let mut blocks = vec![("weight".to_string(), vec![d])];
        if logistic {
            blocks.push(("bias".to_string(), vec![1]));
        }
        Regression {
            layout: ParamLayout::new(blocks),
            dim: d,
            logistic,
            truth: [base, anneal],
            noise: [cfg.noise_scale, cfg.noise_scale * cfg.anneal_noise_factor],
            batch: cfg.batch_size,
            eval_samples: cfg.eval_samples,
        }
    }

    /// Draws `(x, y)`. Logistic labels come from noisy logits.
    fn sample(&self, rng: &mut ChaCha8Rng, s: usize) -> (Vec<f64>, f64) {
        let x = normals(rng, self.dim, 1.0);
        let z: f64 = x.iter().zip(&self.truth[s]).map(|(a, b)| a * b).sum::<f64>()
            + self.noise[s] * normal(rng);
        let y = if self.logistic {
            let u: f64 = rng.random();
            if u < sigmoid(z) {
                1.0
            } else {
                0.0
            }
        } else {
            z
        };
        (x, y)
    }

    // Layout order is "bias" < "weight".
    fn split<'a, T>(&self, theta: &'a [T]) -> (T, &'a [T])
    where
        T: Real,
    {
        if self.logistic {
            (theta[0], &theta[1..])
        } else {
            (T::zero(), theta)
        }
    }

    fn loss_and_residual<T: Real>(&self, theta: &[T], x: &[f64], y: f64) -> (T, T) {
        let (bias, w) = self.split(theta);
        let z = w
            .iter()
            .zip(x)
            .fold(bias, |acc, (&wi, &xi)| acc + wi * T::lit(xi));
        let y = T::lit(y);
        if self.logistic {
            let p = T::lit(sigmoid(z.approx_f64()));
            (softplus(z) - y * z, p - y)
        } else {
            let r = z - y;
            (T::lit(0.5) * r * r, r)
        }
    }
}

impl<T: Real> Objective<T> for Regression {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<T> {
        normals(rng, self.layout.total(), 0.1).into_iter().map(T::lit).collect()
    }

    fn sample_grad(&self, theta: &[T], source: DataSource, rng: &mut ChaCha8Rng, grad: &mut [T]) -> T {
        grad.iter_mut().for_each(|g| *g = T::zero());
        let off = usize::from(self.logistic);
        let mut loss = T::zero();
        for _ in 0..self.batch {
            let (x, y) = self.sample(rng, source as usize);
            let (l, r) = self.loss_and_residual(theta, &x, y);
            loss = loss + l;
            if self.logistic {
                grad[0] = grad[0] + r;
            }
            for (g, &xi) in grad[off..].iter_mut().zip(&x) {
                *g = *g + r * T::lit(xi);
            }
        }
        let b = T::lit(self.batch as f64);
        grad.iter_mut().for_each(|g| *g = *g / b);
        loss / b
    }

    fn eval_loss(&self, theta: &[T], source: DataSource, eval_seed: u64) -> T {
        let mut rng = eval_rng(eval_seed, source);
        let mut total = T::zero();
        for _ in 0..self.eval_samples {
            let (x, y) = self.sample(&mut rng, source as usize);
            total = total + self.loss_and_residual(theta, &x, y).0;
        }
        total / T::lit(self.eval_samples as f64)
    }
}

/// One-hidden-layer tanh network regressing a fixed random teacher.
struct Mlp {
    layout: ParamLayout,
    at: MlpOffsets,
    teacher: [Vec<f64>; 2],
    noise: [f64; 2],
    batch: usize,
    eval_samples: usize,
}

/// Flat offsets of the MLP blocks in name order: b1, b2, w1, w2.
#[derive(Debug, Clone, Copy)]
struct MlpOffsets {
    input: usize,
    hidden: usize,
    b1: usize,
    b2: usize,
    w1: usize,
    w2: usize,
}

impl MlpOffsets {
    fn new(d: usize, h: usize) -> Self {
        MlpOffsets {
            input: d,
            hidden: h,
            b1: 0,
            b2: h,
            w1: h + 1,
            w2: h + 1 + h * d,
        }
    }

    /// Returns the output and the hidden activations.
    fn forward<T: Real>(&self, p: &[T], x: &[T]) -> (T, Vec<T>) {
        let d = self.input;
        let mut act = Vec::with_capacity(self.hidden);
        let mut out = p[self.b2];
        for j in 0..self.hidden {
            let row = &p[self.w1 + j * d..self.w1 + (j + 1) * d];
            let pre = row.iter().zip(x).fold(p[self.b1 + j], |acc, (&w, &xi)| acc + w * xi);
            let a = pre.tanh();
            out = out + p[self.w2 + j] * a;
            act.push(a);
        }
        (out, act)
    }
}

impl Mlp {
    fn new(cfg: &ProblemConfig) -> Self {
        let (d, h) = (cfg.dim, cfg.hidden);
        let layout = ParamLayout::new(vec![
            ("w1".into(), vec![h, d]),
            ("b1".into(), vec![h]),
            ("w2".into(), vec![1, h]),
            ("b2".into(), vec![1]),
        ]);
        let at = MlpOffsets::new(d, h);
        let mut rng = instance_rng(cfg.instance_seed, 3);
        let mut base = vec![0.0; layout.total()];
        for i in 0..h * d {
            base[at.w1 + i] = normal(&mut rng) / (d as f64).sqrt();
        }
        for i in 0..h {
            base[at.b1 + i] = 0.1 * normal(&mut rng);
            base[at.w2 + i] = normal(&mut rng) / (h as f64).sqrt();
        }
        let mut anneal = base.clone();
        for i in 0..h {
            anneal[at.w2 + i] += cfg.anneal_shift * normal(&mut rng) / (h as f64).sqrt();
        }
        let sigma = 0.1 * cfg.noise_scale;
        Mlp {
            layout,
            at,
            teacher: [base, anneal],
            noise: [sigma, sigma * cfg.anneal_noise_factor],
            batch: cfg.batch_size,
            eval_samples: cfg.eval_samples,
        }
    }

    fn sample<T: Real>(&self, rng: &mut ChaCha8Rng, s: usize) -> (Vec<T>, T) {
        let x = normals(rng, self.at.input, 1.0);
        let (y, _) = self.at.forward::<f64>(&self.teacher[s], &x);
        let y = y + self.noise[s] * normal(rng);
        (x.into_iter().map(T::lit).collect(), T::lit(y))
    }
}

impl<T: Real> Objective<T> for Mlp {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<T> {
        let at = self.at;
        let (d, h) = (at.input, at.hidden);
        let mut p = vec![T::zero(); self.layout.total()];
        for i in 0..h * d {
            p[at.w1 + i] = T::lit(normal(rng) / (d as f64).sqrt());
        }
        for i in 0..h {
            p[at.w2 + i] = T::lit(normal(rng) / (h as f64).sqrt());
        }
        p
    }

    fn sample_grad(&self, theta: &[T], source: DataSource, rng: &mut ChaCha8Rng, grad: &mut [T]) -> T {
        let at = self.at;
        let d = at.input;
        grad.iter_mut().for_each(|g| *g = T::zero());
        let mut loss = T::zero();
        for _ in 0..self.batch {
            let (x, y) = self.sample::<T>(rng, source as usize);
            let (out, act) = at.forward(theta, &x);
            let r = out - y;
            loss = loss + T::lit(0.5) * r * r;
            grad[at.b2] = grad[at.b2] + r;
            for (j, &a) in act.iter().enumerate() {
                grad[at.w2 + j] = grad[at.w2 + j] + r * a;
                let back = r * theta[at.w2 + j] * (T::one() - a * a);
                grad[at.b1 + j] = grad[at.b1 + j] + back;
                for (g, &xi) in grad[at.w1 + j * d..at.w1 + (j + 1) * d].iter_mut().zip(&x) {
                    *g = *g + back * xi;
                }
            }
        }
        let b = T::lit(self.batch as f64);
        grad.iter_mut().for_each(|g| *g = *g / b);
        loss / b
    }

    fn eval_loss(&self, theta: &[T], source: DataSource, eval_seed: u64) -> T {
        let mut rng = eval_rng(eval_seed, source);
        let mut total = T::zero();
        for _ in 0..self.eval_samples {
            let (x, y) = self.sample::<T>(&mut rng, source as usize);
            let r = self.at.forward(theta, &x).0 - y;
            total = total + T::lit(0.5) * r * r;
        }
        total / T::lit(self.eval_samples as f64)
    }
}
