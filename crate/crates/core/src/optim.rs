//! Adam with bias-corrected moment estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Elementwise gradient clipping threshold; off when `None`.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            clip,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            if p.grad.shape() != p.value.shape() {
                return Err(Error::shape("adam", p.grad.shape(), p.value.shape()));
            }
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros_like(&p.value),
                v: Tensor::zeros_like(&p.value),
            });
            if mom.m.shape() != p.value.shape() {
                return Err(Error::shape("adam", mom.m.shape(), p.value.shape()));
            }
            let g = p.grad.data();
            let m = mom.m.data_mut();
            for i in 0..g.len() {
                let gi = clip.map_or(g[i], |c| g[i].clamp(-c, c));
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            }
            let v = mom.v.data_mut();
            for i in 0..g.len() {
                let gi = clip.map_or(g[i], |c| g[i].clamp(-c, c));
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (mom.m.data(), mom.v.data());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
