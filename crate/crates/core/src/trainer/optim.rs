use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    /// Adam with decoupled weight decay.
    Adaptive,
}

impl FromStr for OptimizerKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "sgd" => OptimizerKind::Sgd,
            "momentum" => OptimizerKind::Momentum,
            "adaptive" | "adamw" => OptimizerKind::Adaptive,
            other => return Err(TrainError::Config(format!("unknown optimizer {other:?}"))),
        })
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adaptive => "adaptive",
        })
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn momentum(momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Momentum,
            momentum,
            ..Self::sgd()
        }
    }

    /// Betas (0.9, 0.95) and weight decay 0.1.
    pub fn adaptive() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adaptive,
            weight_decay: 0.1,
            ..Self::sgd()
        }
    }

    pub fn of_kind(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(),
            OptimizerKind::Momentum => Self::momentum(default_momentum()),
            OptimizerKind::Adaptive => Self::adaptive(),
        }
    }

    /// A peak LR for this optimizer given the plain-SGD LR of a problem.
    pub fn default_lr(&self, sgd_lr: f64) -> f64 {
        match self.kind {
            OptimizerKind::Sgd => sgd_lr,
            // Heavy ball amplifies steps by 1 / (1 - momentum).
            OptimizerKind::Momentum => sgd_lr * (1.0 - self.momentum),
            OptimizerKind::Adaptive => 1e-2,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(TrainError::Config(format!("{name} must be in [0, 1), got {v}")))
            }
        };
        unit("momentum", self.momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        unit("weight_decay", self.weight_decay)?;
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(TrainError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn build<T: Real>(&self, n: usize) -> Optimizer<T> {
        let slots = match self.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Momentum => 1,
            OptimizerKind::Adaptive => 2,
        };
        Optimizer {
            config: self.clone(),
            first: vec![T::zero(); if slots >= 1 { n } else { 0 }],
            second: vec![T::zero(); if slots == 2 { n } else { 0 }],
            steps: 0,
        }
    }
}

/// Optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    first: Vec<T>,
    second: Vec<T>,
    steps: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update in place.
    pub fn step(&mut self, theta: &mut [T], grad: &[T], lr: T) {
        let c = &self.config;
        let decay = T::lit(c.weight_decay);
        self.steps += 1;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in theta.iter_mut().zip(grad) {
                    *p = *p - lr * (g + decay * *p);
                }
            }
            OptimizerKind::Momentum => {
                let mu = T::lit(c.momentum);
                for ((p, v), &g) in theta.iter_mut().zip(&mut self.first).zip(grad) {
                    *v = mu * *v + g;
                    *p = *p - lr * (*v + decay * *p);
                }
            }
            OptimizerKind::Adaptive => {
                let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                let one = T::one();
                let fix1 = one - b1.powi(self.steps);
                let fix2 = one - b2.powi(self.steps);
                let eps = T::lit(c.eps);
                for (((p, m), v), &g) in theta
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .zip(grad)
                {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / fix1;
                    let v_hat = *v / fix2;
                    *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + decay * *p);
                }
            }
        }
    }
}
