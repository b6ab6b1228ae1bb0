//! Adaptive-moment gradient descent over a flat parameter vector.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::math::FloatMath;

#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplied onto the learning rate every iteration; 1.0 disables decay.
    pub lr_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            iterations: 2000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_decay: 1.0,
        }
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    beta1_t: f64,
    beta2_t: f64,
    epsilon: f64,
    lr_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(dim: usize, cfg: &OptimizerConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            beta1_t: 1.0,
            beta2_t: 1.0,
            epsilon: cfg.epsilon,
            lr_decay: cfg.lr_decay,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    /// In-place parameter update from one gradient evaluation.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.beta1_t *= self.beta1;
        self.beta2_t *= self.beta2;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / (1.0 - self.beta1_t);
            let v_hat = self.v[i] / (1.0 - self.beta2_t);
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        self.lr *= self.lr_decay;
    }
}
