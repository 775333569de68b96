use serde::{Deserialize, Serialize};

use super::{Gradients, NamedTensors};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

/// Adam with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: NamedTensors,
    second: NamedTensors,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: NamedTensors::new(),
            second: NamedTensors::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Matrix> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Matrix> {
        self.second.get(name)
    }

    /// Applies one update to every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut NamedTensors, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Validation(format!("gradient for unknown parameter '{name}'")))?;
            if p.shape() != g.shape() {
                return Err(Error::Validation(format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let (rows, cols) = p.shape();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(rows, cols));
            let ps = p.as_mut_slice();
            for (((w, &gi), mi), vi) in ps
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                let gi = gi * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
