use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

/// Scalars persisted with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamScalars {
    pub step: u64,
    #[serde(flatten)]
    pub config: AdamConfig,
}

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based index of this update.
pub fn adam_update(params: &mut [f64], grads: &[f64], first: &mut [f64], second: &mut [f64], step: u64, cfg: &AdamConfig) {
    let t = step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        first[i] = cfg.beta1 * first[i] + (1.0 - cfg.beta1) * g;
        second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Adam optimizer bound to the layout of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |p: &super::params::Param| if p.trainable { vec![0.0; p.value.len()] } else { Vec::new() };
        Self {
            config,
            step: 0,
            first: store.iter().map(|(_, p)| zeros(p)).collect(),
            second: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn scalars(&self) -> AdamScalars {
        AdamScalars { step: self.step, config: self.config }
    }

    /// Applies one update. `grads` is indexed like the store; `None` entries
    /// (parameters the loss does not reach) count as zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != self.first.len() || store.len() != self.first.len() {
            return Err(config_err(format!(
                "optimizer tracks {} tensors but got {} gradients for {} parameters",
                self.first.len(),
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        for (i, param) in store.params_mut().iter_mut().enumerate() {
            if !param.trainable {
                continue;
            }
            let zero;
            let g = match &grads[i] {
                Some(g) => {
                    if g.shape() != param.value.shape() {
                        return Err(config_err(format!(
                            "gradient for {} has shape {:?}, parameter has {:?}",
                            param.name,
                            g.shape(),
                            param.value.shape()
                        )));
                    }
                    g.data()
                }
                None => {
                    zero = vec![0.0; param.value.len()];
                    &zero
                }
            };
            adam_update(param.value.data_mut(), g, &mut self.first[i], &mut self.second[i], self.step, &self.config);
        }
        Ok(())
    }
}
