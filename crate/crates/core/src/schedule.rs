//! Gradual pruning schedule: a cubic ramp from no pruning to the final leftover.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub ramp_steps: usize,
    pub final_leftover: Real,
    /// Masks are recomputed every this many steps once pruning starts.
    pub recompute_interval: usize,
}

impl PruneSchedule {
    pub fn new(
        total_steps: usize,
        warmup_steps: usize,
        ramp_steps: usize,
        final_leftover: Real,
        recompute_interval: usize,
    ) -> Result<Self> {
        if !(final_leftover > 0.0 && final_leftover <= 1.0) {
            return Err(Error::Config(format!(
                "final leftover {final_leftover} outside (0, 1]"
            )));
        }
        if recompute_interval == 0 {
            return Err(Error::Config("recompute interval must be positive".into()));
        }
        if warmup_steps + ramp_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup {warmup_steps} + ramp {ramp_steps} exceeds {total_steps} steps"
            )));
        }
        Ok(PruneSchedule {
            total_steps,
            warmup_steps,
            ramp_steps,
            final_leftover,
            recompute_interval,
        })
    }

    /// Warmup and ramp end given as fractions of `total_steps`.
    pub fn from_fractions(
        total_steps: usize,
        final_leftover: Real,
        warmup_fraction: Real,
        ramp_end_fraction: Real,
        recompute_interval: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&warmup_fraction)
            || !(0.0..=1.0).contains(&ramp_end_fraction)
            || ramp_end_fraction < warmup_fraction
        {
            return Err(Error::Config(format!(
                "schedule fractions warmup {warmup_fraction}, ramp end {ramp_end_fraction} must satisfy 0 ≤ warmup ≤ ramp end ≤ 1"
            )));
        }
        let warmup = (warmup_fraction * total_steps as Real).round() as usize;
        let end = ((ramp_end_fraction * total_steps as Real).round() as usize).max(warmup);
        Self::new(
            total_steps,
            warmup,
            end - warmup,
            final_leftover,
            recompute_interval,
        )
    }

    pub fn ramp_end(&self) -> usize {
        self.warmup_steps + self.ramp_steps
    }

    /// Target leftover fraction at step `t`.
    pub fn target_leftover(&self, t: usize) -> Result<Real> {
        if t > self.total_steps {
            return Err(Error::invalid(
                "target_leftover",
                format!("step {t} beyond total {}", self.total_steps),
            ));
        }
        if t < self.warmup_steps {
            return Ok(1.0);
        }
        if t >= self.ramp_end() {
            return Ok(self.final_leftover);
        }
        let p = (t - self.warmup_steps) as Real / self.ramp_steps as Real;
        let v = self.final_leftover;
        Ok(v + (1.0 - v) * (1.0 - p).powi(3))
    }

    /// Whether masks should be recomputed at step `t`: every interval from
    /// the end of warmup, plus the step where the ramp ends.
    pub fn is_recompute_step(&self, t: usize) -> bool {
        if t < self.warmup_steps || t >= self.total_steps.max(1) {
            return false;
        }
        (t - self.warmup_steps) % self.recompute_interval == 0 || t == self.ramp_end()
    }
}
