//! SGD with momentum, Adam, and the poly learning-rate schedule.

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// Momentum buffers, one per parameter, allocated on first use.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub config: SgdConfig,
    pub velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(config: SgdConfig) -> Self {
        SgdState {
            config,
            velocity: Vec::new(),
        }
    }

    /// `v <- mu * v + (g + wd * p)`, `p <- p - lr * v`. Frozen parameters are skipped.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let mu = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        let lr = T::from_f64(lr);
        for (id, g) in grads {
            let p = params.get_mut(*id);
            if p.frozen {
                continue;
            }
            if g.shape() != p.tensor.shape() {
                return Err(TensorError::shape("sgd_step", &[p.tensor.shape(), g.shape()]));
            }
            let v = self.velocity[id.0].get_or_insert_with(|| vec![T::ZERO; g.numel()]);
            for ((pv, vv), &gv) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = mu * *vv + (gv + wd * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments over a flat parameter vector, without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        AdamState {
            config,
            m: vec![T::ZERO; len],
            v: vec![T::ZERO; len],
            step: 0,
        }
    }

    /// One bias-corrected update. Entries with `active[i] == false` are left
    /// untouched, moments included.
    pub fn step(&mut self, params: &mut [T], grads: &[T], active: Option<&[bool]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::shape("adam_step", &[&[self.m.len()], &[params.len()], &[grads.len()]]));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let corr1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let corr2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for i in 0..params.len() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::ONE - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::ONE - b2) * g * g;
            let mhat = self.m[i] / corr1;
            let vhat = self.v[i] / corr2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// `lr0 * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(TensorError::invalid("poly_lr", "max_iter must be positive"));
    }
    if iter > max_iter {
        return Err(TensorError::invalid("poly_lr", format!("iteration {iter} beyond {max_iter}")));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}
