//! AdamW with decoupled weight decay, global-norm clipping and the cosine
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter (empty for buffers).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |p: &crate::params::Param<T>| if p.kind.trainable() { vec![T::zero(); p.value.numel()] } else { Vec::new() };
        Self {
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
            step: 0,
        }
    }

    /// Moment tensors shaped like their parameters, for checkpointing.
    pub fn moment_stores(&self, store: &ParamStore<T>) -> (ParamStore<T>, ParamStore<T>) {
        let mut m = store.clone();
        let mut v = store.clone();
        for (i, ((_, pm), (_, pv))) in m.iter_mut().zip(v.iter_mut()).enumerate() {
            if !self.m[i].is_empty() {
                pm.value = Tensor::new(pm.value.shape().to_vec(), self.m[i].clone()).expect("moment shape");
                pv.value = Tensor::new(pv.value.shape().to_vec(), self.v[i].clone()).expect("moment shape");
            }
        }
        (m, v)
    }
}

/// Fails with the first parameter whose gradient is not finite.
pub fn check_finite_grads<T: Float>(store: &ParamStore<T>) -> Result<()> {
    for (_, p) in store.iter() {
        if p.kind.trainable() && p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

/// One bias-corrected AdamW update. Weight decay applies to conv and linear
/// weights only. A non-finite gradient aborts before anything changes.
pub fn adamw_step<T: Float>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    check_finite_grads(store)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::of(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr_t, eps) = (T::of(lr), T::of(cfg.eps));
    let decay = T::of(lr * cfg.weight_decay);
    for (i, (_, p)) in store.iter_mut().enumerate() {
        if !p.kind.trainable() {
            continue;
        }
        let decayed = p.kind.decayed() && cfg.weight_decay != 0.0;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * *g;
            *v = b2 * *v + one_b2 * *g * *g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            if decayed {
                *w -= decay * *w;
            }
            *w -= lr_t * update;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipReport {
    pub norm: f64,
    pub scale: f64,
}

pub fn grad_norm<T: Float>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .flat_map(|(_, p)| p.grad.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`.
pub fn clip_grad_norm<T: Float>(store: &mut ParamStore<T>, max_norm: f64) -> ClipReport {
    let norm = grad_norm(store);
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale != 1.0 {
        scale_grads(store, scale);
    }
    ClipReport { norm, scale }
}

pub fn scale_grads<T: Float>(store: &mut ParamStore<T>, scale: f64) {
    let s = T::of(scale);
    for (_, p) in store.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// `lr_min + (lr0 - lr_min) (1 + cos(pi epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    // lr_min + (lr0 - lr_min) need not round back to lr0.
    if total_epochs == 0 || epoch == 0 {
        return lr0;
    }
    if epoch >= total_epochs {
        return lr_min;
    }
    let c = (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos();
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + c)
}
