use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    /// One bias-corrected Adam update of `param` in place.
    pub fn update(&mut self, param: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Contract(format!(
                "adam: parameter has {} entries, gradient {}",
                param.len(),
                grad.len()
            )));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; param.len()];
            self.v = vec![0.0; param.len()];
        } else if self.m.len() != param.len() {
            return Err(Error::Contract("adam: optimizer state does not match parameter".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Adam over a set of named parameters.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            states: BTreeMap::new(),
        }
    }

    /// Applies the gradient stored on `param`. Parameters without a gradient
    /// buffer are left alone.
    pub fn step(&mut self, name: &str, param: &mut Tensor, lr: f64) -> Result<()> {
        let Some(grad) = param.grad().map(<[f64]>::to_vec) else {
            return Ok(());
        };
        let state = self.states.entry(name.to_string()).or_default();
        state.update(param.data_mut(), &grad, lr, &self.config)
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }
}
