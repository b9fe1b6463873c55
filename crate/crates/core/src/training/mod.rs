//! Stochastic subgradient training of cascade levels, the perceptron and CRF
//! baselines, threshold tuning and the full level-by-level cascade.

mod baselines;
mod cascade;
mod sc;
mod scaled;
mod tune;

pub use baselines::{crf_train, perceptron_train};
pub use cascade::{
    evaluate_cascade, run_cascade, train_cascade, CascadeConfig, CascadeReport, CascadeRun,
    Expansion, LevelConfig, LevelMetrics, TrainedCascade, TrainedLevel,
};
pub use sc::{regularized_objective, sc_direction, sc_step, train_level};
pub use tune::{evaluate_alpha, tune_alpha, AlphaChoice};

use alloc::vec::Vec;

use crate::lattice::SparseLattice;
use crate::model::{Output, SequenceInput};
use crate::threshold::FilterTarget;
use crate::{Error, Result};

/// Step size `η_t` as a function of the 1-based step index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `η_t = 1 / (λ t)`; needs `λ > 0`.
    Pegasos,
}

/// Margin `ℓⁱ` required between the truth score and the threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarginMode {
    /// Number of positions of the example.
    Length,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub eta: StepSchedule,
    pub epochs: usize,
    pub seed: u64,
    pub averaging: bool,
    pub margin: MarginMode,
    pub target: FilterTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            eta: StepSchedule::Constant(0.1),
            epochs: 5,
            seed: 0,
            averaging: true,
            margin: MarginMode::Length,
            target: FilterTarget::Clique,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(alloc::format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        match self.eta {
            StepSchedule::Constant(c) if !(c.is_finite() && c > 0.0) => Err(Error::Config(
                alloc::format!("constant step {c} must be positive"),
            )),
            StepSchedule::Pegasos if self.lambda <= 0.0 => Err(Error::Config(
                "the pegasos schedule needs lambda > 0".into(),
            )),
            _ => match self.margin {
                MarginMode::Constant(m) if !(m.is_finite() && m > 0.0) => {
                    Err(Error::Config(alloc::format!("margin {m} must be positive")))
                }
                _ => Ok(()),
            },
        }
    }

    /// `η_t` for the 1-based step `t`.
    pub fn step_size(&self, t: u64) -> f64 {
        match self.eta {
            StepSchedule::Constant(c) => c,
            StepSchedule::Pegasos => 1.0 / (self.lambda * t.max(1) as f64),
        }
    }

    pub fn margin_for(&self, length: usize) -> f64 {
        match self.margin {
            MarginMode::Length => length as f64,
            MarginMode::Constant(m) => m,
        }
    }
}

/// A labelled sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: SequenceInput,
    pub truth: Output,
}

/// A labelled sequence together with its current output space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeExample {
    pub input: SequenceInput,
    pub truth: Output,
    pub lattice: SparseLattice,
}

impl LatticeExample {
    /// Full lattice at clique size `min(order, length)`.
    pub fn full(example: &Example, num_states: usize, order: usize) -> Result<Self> {
        let order = order.clamp(1, example.input.len().max(1));
        Ok(Self {
            input: example.input.clone(),
            truth: example.truth.clone(),
            lattice: SparseLattice::full(example.input.len(), num_states, order)?,
        })
    }
}

pub(crate) fn check_examples(data: &[LatticeExample]) -> Result<()> {
    for (i, ex) in data.iter().enumerate() {
        if ex.input.len() != ex.lattice.length() || ex.truth.len() != ex.input.len() {
            return Err(Error::Shape(alloc::format!(
                "example {i}: input, truth and lattice lengths differ"
            )));
        }
        ex.truth.validate(ex.lattice.num_states())?;
    }
    Ok(())
}

/// Fisher-Yates order for one epoch.
pub(crate) fn epoch_order(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
