use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-step multiplicative learning-rate decay; 1.0 keeps it constant.
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-9,
            lr_decay: 1.0,
        }
    }
}

/// First and second moments per parameter name, plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
    params: Vec<(String, Var)>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
            params,
        }
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.lr_decay.powf(self.state.step as f64)
    }

    /// One update from `grads`; parameters with no gradient are skipped.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let lr = self.current_lr();
        self.state.step += 1;
        let t = self.state.step as f64;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m_prev = match self.state.m.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.state.v.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v_prev * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let next = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&next)?;
            self.state.m.insert(name.clone(), m);
            self.state.v.insert(name.clone(), v);
        }
        Ok(())
    }
}
