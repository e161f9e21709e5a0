//! Adaptive moment estimation with coupled L2 weight decay.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment state for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `g ← g + λθ`, moment updates, bias-corrected step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - math::powf(c.beta1, self.t as f64);
        let bc2 = 1.0 - math::powf(c.beta2, self.t as f64);
        for (((p, g), m), v) in store.iter_mut().zip(grads.bufs()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let grad = g[i] + c.weight_decay * p.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad * grad;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= c.learning_rate * mhat / (math::sqrt(vhat) + c.eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Grads], max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.iter().map(|g| g.sum_of_squares()).sum());
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(factor));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", vec![values.len()], values.to_vec());
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[1.0, -2.0]);
        let mut g = s.zero_grads();
        g.bufs_mut()[0].copy_from_slice(&[0.5, -3.0]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &s);
        opt.step(&mut s, &g);
        let w = &s.iter().next().unwrap().data;
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let mut s = store(&[0.3, -0.7, 1e-12]);
        let before = s.clone();
        let mut g = s.zero_grads();
        g.bufs_mut()[0].copy_from_slice(&[1.0, 2.0, -3.0]);
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.0,
                ..AdamConfig::default()
            },
            &s,
        );
        opt.step(&mut s, &g);
        assert_eq!(s, before);
    }

    #[test]
    fn clipping_caps_norm() {
        let s = store(&[0.0, 0.0]);
        let mut g = s.zero_grads();
        g.bufs_mut()[0].copy_from_slice(&[3.0, 4.0]);
        let n = clip_global_norm(&mut [&mut g], 1.0);
        assert_eq!(n, 5.0);
        assert!((g.sum_of_squares() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut s = store(&[5.0]);
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &s,
        );
        for _ in 0..500 {
            let mut g = s.zero_grads();
            let w = s.iter().next().unwrap().data[0];
            g.bufs_mut()[0][0] = 2.0 * (w - 1.0);
            opt.step(&mut s, &g);
        }
        assert!((s.iter().next().unwrap().data[0] - 1.0).abs() < 1e-2);
    }
}
