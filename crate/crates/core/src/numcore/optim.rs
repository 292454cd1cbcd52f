use serde::{Deserialize, Serialize};

use super::layers::Parameter;
use super::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Moment buffers are created on the first step and matched to parameters
/// by position, so callers must pass parameters in a stable order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Tensor2, Tensor2)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        assert!(config.lr > 0.0, "learning rate must be positive");
        assert!(config.weight_decay >= 0.0, "weight decay must be non-negative");
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, params: Vec<&mut Parameter>) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| {
                    let (r, c) = p.shape();
                    (Tensor2::zeros(r, c), Tensor2::zeros(r, c))
                })
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter count changed");
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for (p, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            assert_eq!(p.shape(), m.shape(), "moment buffer shape mismatch");
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for (((w, &g), mm), vv) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mm = beta1 * *mm + (1.0 - beta1) * g;
                *vv = beta2 * *vv + (1.0 - beta2) * g * g;
                let m_hat = *mm / bc1;
                let v_hat = *vv / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
            p.zero_grad();
        }
    }
}
