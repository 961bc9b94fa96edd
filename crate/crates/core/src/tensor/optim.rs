//! AdamW with decoupled weight decay.
//!
//! ```text
//! w ← w·(1 − lr·wd)
//! m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
//! w ← w − lr·m̂ / (√v̂ + ε)   with m̂, v̂ bias corrected
//! ```
//!
//! `maximize` flips the sign of `g` before anything else touches it, so an
//! ascent step is bitwise the same as a descent step on negated gradients.

use indexmap::IndexMap;

use super::ParameterStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moments(&self) -> &IndexMap<String, Vec<f64>> {
        &self.first
    }

    pub fn second_moments(&self) -> &IndexMap<String, Vec<f64>> {
        &self.second
    }

    pub fn step(&mut self, params: &mut ParameterStore, maximize: bool) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad_ready()) {
            return Err(Error::State(format!(
                "gradient for {name} was never populated"
            )));
        }
        if self.first.is_empty() {
            for (name, p) in params.iter() {
                self.first
                    .insert(name.to_string(), vec![0.0; p.value.len()]);
                self.second
                    .insert(name.to_string(), vec![0.0; p.value.len()]);
            }
        } else if self.first.len() != params.len()
            || params
                .iter()
                .any(|(n, p)| self.first.get(n).map(Vec::len) != Some(p.value.len()))
        {
            return Err(Error::State(
                "optimizer state does not match parameter store".into(),
            ));
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;

        for (name, p) in params.iter_mut() {
            let m = self.first.get_mut(name).expect("checked above");
            let v = self.second.get_mut(name).expect("checked above");
            let grad = p.grad.data().to_vec();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = if maximize { -grad[i] } else { grad[i] };
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] = values[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grad();
        Ok(())
    }
}
