//! Adam with bias correction, learning-rate schedules and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
///
/// Call [`Adam::next_step`] once per optimizer step, then [`Adam::delta`]
/// for every scalar in the group.
#[derive(Debug, Clone)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
    c1: T,
    c2: T,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            c1: T::one(),
            c2: T::one(),
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn next_step(&mut self) {
        self.step += 1;
        let t = self.step as i32;
        self.c1 = T::lit(1.0 - self.config.beta1.powi(t));
        self.c2 = T::lit(1.0 - self.config.beta2.powi(t));
    }

    /// Update for scalar `i` given its gradient; add the result to the parameter.
    #[inline]
    pub fn delta(&mut self, i: usize, g: T, lr: T) -> T {
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
        self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
        if lr == T::zero() {
            return T::zero();
        }
        let mh = self.m[i] / self.c1;
        let vh = self.v[i] / self.c2;
        -lr * mh / (vh.sqrt() + T::lit(self.config.eps))
    }

    /// One full step over a contiguous parameter slice.
    pub fn step_slice(&mut self, params: &mut [T], grads: &[T], lr: T) {
        assert_eq!(params.len(), self.len());
        assert_eq!(grads.len(), self.len());
        self.next_step();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            *p += self.delta(i, *g, lr);
        }
    }

    pub fn state(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }
}

/// Linear warm-up followed by cosine decay to `floor·base`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize, floor: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Rescales `grads` in place so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.to_f64() * g.to_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::<f64>::new(2, AdamConfig::default());
        let mut p = [1.0, -2.0];
        adam.step_slice(&mut p, &[0.3, -5.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut adam = Adam::<f32>::new(3, AdamConfig::default());
        let mut p = [0.1f32, 0.2, 0.3];
        for _ in 0..10 {
            adam.step_slice(&mut p, &[1.0, -1.0, 0.5], 0.0);
        }
        assert_eq!(p, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::<f64>::new(1, AdamConfig::default());
        let mut p = [3.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            adam.step_slice(&mut p, &g, 0.01);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn schedule_shape() {
        assert!((cosine_lr(1.0, 0, 100, 10, 0.1) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 100, 10, 0.1) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 100, 100, 10, 0.1) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut g = [3.0f32, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }
}
