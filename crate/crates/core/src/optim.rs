//! ADAM with bias correction and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::net::{Gradients, ModelParameters};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: ModelParameters<T>,
    pub v: ModelParameters<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        OptimizerState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One ADAM update of `params` with gradient `grads` at learning rate `lr`.
    pub fn update(
        &mut self,
        params: &mut ModelParameters<T>,
        grads: &Gradients<T>,
        lr: f64,
        cfg: &AdamConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bias1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
        let bias2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(cfg.eps);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Learning rate at a zero-based epoch: `init * factor^(epoch / every)`.
pub fn learning_rate(init: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return init;
    }
    init * factor.powi((epoch / every) as i32)
}
