//! Weight vector stored as `scale · v` so that L2 shrinkage costs O(1), with
//! the running sum of iterates kept as `acc + weight_sum · v`.

use alloc::vec::Vec;

use crate::model::WeightView;
use crate::{Error, Result};

const RENORMALIZE_BELOW: f64 = 1e-4;

pub(crate) struct ScaledWeights {
    v: Vec<f64>,
    scale: f64,
    averaging: bool,
    acc: Vec<f64>,
    weight_sum: f64,
    steps: u64,
}

impl ScaledWeights {
    pub(crate) fn new(initial: Vec<f64>, averaging: bool) -> Self {
        let acc = if averaging {
            alloc::vec![0.0; initial.len()]
        } else {
            Vec::new()
        };
        Self {
            v: initial,
            scale: 1.0,
            averaging,
            acc,
            weight_sum: 0.0,
            steps: 0,
        }
    }

    /// `θ ← factor · θ`.
    pub(crate) fn shrink(&mut self, factor: f64) {
        if factor == 1.0 {
            return;
        }
        self.scale *= factor;
        if self.scale.abs() < RENORMALIZE_BELOW {
            self.materialize();
        }
    }

    /// Moves the scale into `v` and the pending average into `acc`.
    fn materialize(&mut self) {
        if self.averaging {
            for (a, &v) in self.acc.iter_mut().zip(&self.v) {
                *a += self.weight_sum * v;
            }
            self.weight_sum = 0.0;
        }
        let s = self.scale;
        self.v.iter_mut().for_each(|v| *v *= s);
        self.scale = 1.0;
    }

    /// `θ_i ← θ_i + delta`.
    #[inline]
    pub(crate) fn add(&mut self, index: usize, delta: f64) {
        let dv = delta / self.scale;
        self.v[index] += dv;
        if self.averaging {
            self.acc[index] -= self.weight_sum * dv;
        }
    }

    /// Closes a step: the current iterate enters the average.
    pub(crate) fn end_step(&mut self, touched: &[usize]) -> Result<()> {
        self.steps += 1;
        if !self.scale.is_finite() {
            return Err(Error::NonFinite {
                index: 0,
                step: self.steps,
            });
        }
        if let Some(&index) = touched.iter().find(|&&i| !self.v[i].is_finite()) {
            return Err(Error::NonFinite {
                index,
                step: self.steps,
            });
        }
        self.weight_sum += self.scale;
        Ok(())
    }

    pub(crate) fn current(&self) -> Vec<f64> {
        self.v.iter().map(|&v| self.scale * v).collect()
    }

    /// Uniform average of the iterates after each step, or the last iterate.
    pub(crate) fn finish(self) -> Vec<f64> {
        if !self.averaging || self.steps == 0 {
            return self.current();
        }
        let n = self.steps as f64;
        self.acc
            .iter()
            .zip(&self.v)
            .map(|(&a, &v)| (a + self.weight_sum * v) / n)
            .collect()
    }
}

impl WeightView for ScaledWeights {
    #[inline]
    fn weight(&self, index: usize) -> f64 {
        self.scale * self.v[index]
    }
}
