//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("gradient {index} has length {got}, parameter has {expected}")]
    ShapeMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("{params} parameter arrays but {grads} gradient arrays")]
    CountMismatch { params: usize, grads: usize },
    #[error("non-finite gradient in array {0}")]
    NonFiniteGradient(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    /// Learning rate 1e-3 for training a small model from scratch.
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Learning rate 1e-5, the usual setting for fine-tuning a large pretrained encoder.
    pub fn fine_tune_preset() -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update of every parameter array from its gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<(), OptimizerError> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(OptimizerError::CountMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.first_moment[i].len() != g.len() {
                return Err(OptimizerError::ShapeMismatch {
                    index: i,
                    expected: p.len(),
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimizerError::NonFiniteGradient(i));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for (k, theta) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                *theta -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
