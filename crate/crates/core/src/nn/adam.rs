//! Adam with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
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

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter from its stored
    /// gradient. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = params.trainable().map(str::to_string).collect();
        for n in &names {
            if let Some(i) = params.grad(n).iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {n}[{i}] is {}",
                    params.grad(n)[i]
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for n in &names {
            let g: Vec<f64> = params.grad(n).iter().map(|&v| f64::from(v)).collect();
            let (m, v) = self
                .moments
                .entry(n.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = params.get_mut(n).data_mut();
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mut w = f64::from(p[i]);
                w -= c.lr * c.weight_decay * w;
                w -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] = w as f32;
            }
        }
        Ok(())
    }
}
