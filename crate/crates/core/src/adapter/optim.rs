use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. The registry of updated parameters is
/// fixed at construction: the trainable entries of the store it was built for.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new<F: Real>(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let moments = store
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, t)| (n.to_string(), (vec![0.0; t.len()], vec![0.0; t.len()])))
            .collect();
        AdamW {
            config,
            step: 0,
            moments,
        }
    }

    /// Names of the parameters this optimizer updates.
    pub fn registry(&self) -> Vec<String> {
        self.moments.keys().cloned().collect()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Every registered parameter needs a gradient, and no
    /// gradient may name an unregistered parameter.
    pub fn step<F: Real>(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &BTreeMap<String, Vec<F>>,
    ) -> Result<()> {
        if let Some(extra) = grads.keys().find(|k| !self.moments.contains_key(*k)) {
            return Err(Error::Frozen(format!(
                "gradient for unregistered parameter {extra}"
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, (m, v)) in &mut self.moments {
            let t = store.get_mut(name)?;
            let zeros;
            let g = match grads.get(name) {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![F::zero(); t.len()];
                    &zeros
                }
            };
            if g.len() != t.len() {
                return Err(Error::dim("adamw", t.shape(), &[g.len()]));
            }
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let pf = p.as_f64();
                *p = F::lit(pf - c.lr * (update + c.weight_decay * pf));
            }
        }
        Ok(())
    }
}
