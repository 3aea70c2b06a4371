//! Learning-rate decay emulation through weighted checkpoint merging.
//!
//! A decay schedule over the last `k` update intervals is equivalent to a
//! convex combination of the `k + 1` checkpoints that bound them. This crate
//! converts between the two views, merges checkpoint archives by streaming,
//! and ships a toy trainer plus analysis tools to exercise the idea.

pub mod analysis;
pub mod cli;
pub mod merger;
pub mod scalar;
pub mod schedule;
pub mod tensorstore;
pub mod trainer;
pub mod weights;

use num_rational::BigRational;

pub type Schedule = schedule::DecaySchedule<f64>;
pub type Schedule32 = schedule::DecaySchedule<f32>;
pub type ExactSchedule = schedule::DecaySchedule<BigRational>;
pub type Weights = weights::MergeWeights<f64>;
pub type Weights32 = weights::MergeWeights<f32>;
pub type ExactWeights = weights::MergeWeights<BigRational>;
pub type Trainer = trainer::Trainer<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Matrix = analysis::Matrix<f64>;
