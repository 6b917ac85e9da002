use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    /// Number of updates applied.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &OptimConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in store.vars() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name, var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            clip: cfg.grad_clip,
            t: 0,
            m,
            v,
        })
    }

    /// Global L2 norm of all gradients; parameters without one count as zero.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in store.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    /// Parameters are left untouched when the norm is not finite.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let norm = Self::grad_norm(store, grads)?;
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm {norm}")));
        }
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            let m = self.m.get_mut(&name).ok_or_else(|| missing(&name))?;
            *m = ((&*m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = self.v.get_mut(&name).ok_or_else(|| missing(&name))?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&*v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&*m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(norm)
    }
}

fn missing(name: &str) -> Error {
    Error::Contract(format!("optimizer has no state for parameter {name}"))
}
