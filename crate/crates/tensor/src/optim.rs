use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Linear warm-up from 0 at step 0 to `base` at `warmup_steps`, constant after.
pub fn warmup_lr(base: f64, warmup_steps: u64, step: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base
    } else {
        base * step as f64 / warmup_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: HashMap<ParamId, Tensor<T>>,
    v: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`:
    /// `p <- p - lr*wd*p`, then `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let decay = T::c(1.0 - lr * c.weight_decay);
        let step_size = T::c(lr / bc1);
        let bc2_sqrt = T::c(bc2.sqrt());
        let eps = T::c(c.eps);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let m = self.m.entry(*id).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(*id).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            let p = store.value_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (T::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                let denom = vd[i].sqrt() / bc2_sqrt + eps;
                p[i] = p[i] * decay - step_size * md[i] / denom;
            }
        }
    }

    /// Optimizer moments keyed by parameter name, for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let mut ids: Vec<&ParamId> = self.m.keys().collect();
        ids.sort();
        for id in ids {
            let name = store.name(*id);
            out.push((format!("optim.m.{name}"), self.m[id].clone()));
            out.push((format!("optim.v.{name}"), self.v[id].clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        store: &ParamStore<T>,
        step: u64,
        tensors: &HashMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for id in store.ids() {
            let name = store.name(id);
            match (tensors.get(&format!("optim.m.{name}")), tensors.get(&format!("optim.v.{name}"))) {
                (Some(m), Some(v)) => {
                    if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                        return Err(TensorError::Shape(format!("optimizer state shape mismatch for {name}")));
                    }
                    self.m.insert(id, m.clone());
                    self.v.insert(id, v.clone());
                }
                (None, None) => {}
                _ => return Err(TensorError::Other(format!("incomplete optimizer state for {name}"))),
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|(_, g)| g.sq_norm().f64()).sum::<f64>().sqrt();
    if total > max_norm && total > 0.0 {
        let s = T::c(max_norm / total);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    total
}
