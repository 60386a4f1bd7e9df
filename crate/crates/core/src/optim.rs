//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescales the gradients so their global L2 norm is at most this; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            max_grad_norm: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::config("optimizer.max_grad_norm", "must be non-negative"));
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient.
pub fn global_norm<T: Real>(grads: &BTreeMap<String, Mat<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Mat<T>>,
    pub v: BTreeMap<String, Mat<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every parameter named in `grads`; frozen parameters are refused.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Mat<T>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let norm = global_norm(grads);
        let clip = if c.max_grad_norm > 0.0 && norm > c.max_grad_norm {
            T::cst(c.max_grad_norm / norm)
        } else {
            T::one()
        };
        let (b1, b2) = (T::cst(c.beta1), T::cst(c.beta2));
        let bc1 = T::cst(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::cst(1.0 - c.beta2.powi(self.step as i32));
        let (lr_t, decay, eps) = (T::cst(lr), T::cst(1.0 - lr * c.weight_decay), T::cst(c.eps));
        for (name, raw) in grads {
            let g = &raw.scale(clip);
            if params.get(name)?.frozen {
                return Err(Error::InvalidInput(format!("refusing to update frozen `{name}`")));
            }
            let (r, cols) = g.shape();
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(r, cols));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(r, cols));
            if lr == 0.0 {
                for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *mi = b1 * *mi + (T::one() - b1) * gi;
                    *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                }
                continue;
            }
            let p = params.value_mut(name)?;
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi = *pi * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
