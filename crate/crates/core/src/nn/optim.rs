use std::collections::BTreeMap;

use crate::nn::layers::Param;
use crate::scalar::Scalar;

/// RMSProp without momentum: `v = rho v + (1 - rho) g^2`,
/// `w -= lr g / (sqrt(v) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub rho: T,
    pub eps: T,
    /// Squared-gradient averages keyed by parameter name.
    pub state: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Default for RmsProp<T> {
    fn default() -> Self {
        Self {
            rho: T::lit(0.9),
            eps: T::lit(1e-8),
            state: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> RmsProp<T> {
    /// Applies one step to every parameter and clears its gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param<T>>, lr: T) {
        let one_minus = T::one() - self.rho;
        for p in params {
            let v = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); p.value.len()]);
            for ((w, g), s) in p.value.iter_mut().zip(p.grad.iter_mut()).zip(v.iter_mut()) {
                *s = self.rho * *s + one_minus * *g * *g;
                *w -= lr * *g / (s.sqrt() + self.eps);
                *g = T::zero();
            }
        }
    }
}

/// Constant learning rate with an optional linear warm-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
}

impl LrSchedule {
    /// Warm-up spans the first `fraction` of `total_steps` (0 disables it).
    pub fn new(base: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_fraction * total_steps as f64).ceil() as usize;
        Self { base, warmup_steps }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.base
        } else {
            self.base * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr_over_sqrt_one_minus_rho() {
        let mut p = Param::new("w", vec![2], vec![1.0f64, -1.0]);
        p.grad = vec![0.5, -2.0];
        let mut opt = RmsProp::default();
        opt.step([&mut p], 0.01);
        let expect = 0.01 / (0.1f64).sqrt();
        assert!((p.value[0] - (1.0 - expect)).abs() < 1e-6);
        assert!((p.value[1] - (-1.0 + expect)).abs() < 1e-6);
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let s = LrSchedule::new(1e-3, 0.05, 200);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.at(0) - 1e-4).abs() < 1e-12);
        assert_eq!(s.at(10), 1e-3);
        assert_eq!(LrSchedule::new(1e-3, 0.0, 200).at(0), 1e-3);
    }
}
