use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Decoupled-weight-decay Adam with global-norm clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub max_grad_norm: Option<f64>,
    steps: u64,
    first: HashMap<String, Tensor>,
    second: HashMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, max_grad_norm: Option<f64>) -> Result<Self> {
        // negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(lr > 0.0) || weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid optimizer settings lr={lr} weight_decay={weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            max_grad_norm,
            steps: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Global L2 norm of the gradients of `vars`.
    pub fn grad_norm(vars: &[(String, Var)], grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, v) in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update of every variable that received a gradient. Returns the
    /// pre-clipping gradient norm.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let vars = params.named_vars();
        let norm = Self::grad_norm(&vars, grads)?;
        let scale = match self.max_grad_norm {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detached so the stored moments do not keep the graph alive
            let g = g.detach().affine(scale, 0.0)?;
            let m_prev = match self.first.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.second.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = (m_prev.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?;
            let v = (v_prev.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let m_hat = m.affine(1.0 / c1, 0.0)?;
            let denom = (v.affine(1.0 / c2, 0.0)?.sqrt()? + self.eps)?;
            let theta = var.as_tensor().affine(1.0 - self.lr * self.weight_decay, 0.0)?;
            let next = (theta - m_hat.div(&denom)?.affine(self.lr, 0.0)?)?;
            var.set(&next)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(norm)
    }

    /// Writes the moment estimates; the step counter travels in the run manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = HashMap::new();
        for (k, v) in &self.first {
            all.insert(format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            all.insert(format!("v.{k}"), v.clone());
        }
        candle_core::safetensors::save(&all, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path, steps: u64, device: &candle_core::Device) -> Result<()> {
        let all = candle_core::safetensors::load(path, device)?;
        self.first.clear();
        self.second.clear();
        for (k, v) in all {
            if let Some(n) = k.strip_prefix("m.") {
                self.first.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("v.") {
                self.second.insert(n.to_string(), v);
            }
        }
        self.steps = steps;
        Ok(())
    }
}
