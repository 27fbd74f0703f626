use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one [`Params`] set.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .ids()
            .map(|id| vec![0.0; params.value(id).len()])
            .collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update, then clears all gradients.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Usage(format!(
                "optimizer built for {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        if let Some(id) = params.ids().find(|&id| !params.has_grad(id)) {
            return Err(Error::Usage(format!(
                "parameter {} has no gradient for this step",
                params.name(id)
            )));
        }
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let k = id.index();
            let (value, grad) = params.value_and_grad_mut(id);
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grad();
        Ok(())
    }
}
