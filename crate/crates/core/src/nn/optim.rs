use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::param::{Gradients, ParamId, ParamStore, Parameter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: HashMap<ParamId, Vec<f64>>,
    second: HashMap<ParamId, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient.
    ///
    /// `lr_scale` multiplies the base learning rate per parameter, which is how
    /// schedules restricted to a subset of parameters are expressed. Gradients are
    /// validated before anything is touched, so a non-finite gradient leaves both
    /// the parameters and the optimizer state unchanged.
    pub fn step<F>(&mut self, store: &mut ParamStore, grads: &Gradients, lr_scale: F) -> Result<()>
    where
        F: Fn(&Parameter) -> f64,
    {
        let ids = grads.ids();
        for &id in &ids {
            let g = grads.get(id).unwrap();
            let p = store.get(id);
            if g.len() != p.tensor.len() {
                return Err(Error::Dimension(format!(
                    "gradient for `{}` has {} values, parameter has {}",
                    p.name,
                    g.len(),
                    p.tensor.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for id in ids {
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let g = grads.get(id).unwrap();
            let lr = c.lr * lr_scale(param);
            let n = g.len();
            let m = self.first.entry(id).or_insert_with(|| vec![0.0; n]);
            let s = self.second.entry(id).or_insert_with(|| vec![0.0; n]);
            let decay = if param.weight_decay_exempt {
                1.0
            } else {
                1.0 - lr * c.weight_decay
            };
            let w = param.tensor.data_mut();
            for i in 0..n {
                w[i] *= decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                s[i] = c.beta2 * s[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let s_hat = s[i] / bias2;
                w[i] -= lr * m_hat / (s_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
