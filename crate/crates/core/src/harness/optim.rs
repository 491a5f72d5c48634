//! AdamW and the warmup-then-linear-decay learning-rate schedule.

use crate::tensor::Real;

/// Linear warmup to `peak` over `warmup` steps, then linear decay to 0 at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: Real,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn from_fraction(peak: Real, warmup_fraction: Real, total: usize) -> Self {
        let warmup = (warmup_fraction * total as Real).round() as usize;
        LinearSchedule {
            peak,
            warmup: warmup.min(total),
            total,
        }
    }

    /// Rate used for the update at 0-based step `t`.
    pub fn at(&self, t: usize) -> Real {
        if t < self.warmup {
            return self.peak * (t + 1) as Real / self.warmup as Real;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 || t >= self.total {
            return 0.0;
        }
        self.peak * (self.total - t) as Real / span as Real
    }

    /// Fraction of the peak rate at step `t`.
    pub fn factor(&self, t: usize) -> Real {
        if self.peak == 0.0 {
            0.0
        } else {
            self.at(t) / self.peak
        }
    }
}

/// Adam with decoupled weight decay. One moment pair per parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    pub step: u64,
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], beta1: Real, beta2: Real, eps: Real, weight_decay: Real) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advances the shared step counter; call once per optimizer step
    /// before the per-slot updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates slot `i` in place. `decay` selects whether weight decay applies.
    pub fn update(&mut self, i: usize, param: &mut [Real], grad: &[Real], lr: Real, decay: bool) {
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for ((p, &g), (mi, vi)) in param
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            if decay {
                *p -= lr * self.weight_decay * *p;
            }
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let s = LinearSchedule::from_fraction(1.0, 0.1, 100);
        assert_eq!(s.warmup, 10);
        assert_eq!(s.at(0), 0.1);
        assert_eq!(s.at(9), 1.0);
        assert_eq!(s.at(10), 1.0);
        assert!((s.at(55) - 0.5).abs() < 1e-12);
        assert_eq!(s.at(100), 0.0);
        let mut prev = s.at(10);
        for t in 11..100 {
            assert!(s.at(t) < prev && s.at(t) > 0.0);
            prev = s.at(t);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = AdamW::new(&[2], 0.9, 0.999, 1e-12, 0.0);
        let mut p = vec![1.0, -1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[0.5, -2.0], 0.1, false);
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert!((p[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = AdamW::new(&[1], 0.9, 0.999, 1e-8, 0.5);
        let mut p = vec![2.0];
        opt.begin_step();
        opt.update(0, &mut p, &[0.0], 0.1, true);
        assert!((p[0] - 1.9).abs() < 1e-12);
    }
}
