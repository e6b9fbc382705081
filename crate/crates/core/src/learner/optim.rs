//! RMSProp over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig { learning_rate: 4e-4, decay: 0.99, epsilon: 1e-5, momentum: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    cfg: RmsPropConfig,
    mean_square: Vec<f64>,
    velocity: Vec<f64>,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig, num_params: usize) -> Self {
        let velocity = if cfg.momentum > 0.0 { vec![0.0; num_params] } else { Vec::new() };
        RmsProp { cfg, mean_square: vec![0.0; num_params], velocity }
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.cfg
    }

    /// `ms <- decay ms + (1 - decay) g^2`, then
    /// `p <- p - lr g / (sqrt(ms) + eps)` (through a velocity term when
    /// momentum is positive).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let RmsPropConfig { learning_rate, decay, epsilon, momentum } = self.cfg;
        for i in 0..params.len() {
            let g = grad[i];
            let ms = &mut self.mean_square[i];
            *ms = decay * *ms + (1.0 - decay) * g * g;
            let update = learning_rate * g / (ms.sqrt() + epsilon);
            if momentum > 0.0 {
                let v = &mut self.velocity[i];
                *v = momentum * *v + update;
                params[i] -= *v;
            } else {
                params[i] -= update;
            }
        }
    }
}
