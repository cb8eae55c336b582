//! Segmentation losses recorded on the autodiff graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// BCE weight.
    pub alpha: f64,
    /// Dice weight.
    pub beta: f64,
    /// Dice smoothing term.
    pub eps: f64,
    /// BCE probability clamp.
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            eps: 1e-6,
            delta: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("loss.alpha", self.alpha), ("loss.beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        for (field, v) in [("loss.eps", self.eps), ("loss.delta", self.delta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be finite and positive"));
            }
        }
        if self.delta >= 0.5 {
            return Err(Error::config("loss.delta", "must be below 0.5"));
        }
        Ok(())
    }
}

pub fn dice_loss<T: Float>(g: &mut Graph<T>, p: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    g.dice_loss(p, target, T::of(eps))
}

pub fn bce_loss<T: Float>(g: &mut Graph<T>, p: Var, target: &Tensor<T>, delta: f64) -> Result<Var> {
    g.bce_loss(p, target, T::of(delta))
}

/// `alpha * BCE + beta * Dice`.
pub fn total_loss<T: Float>(g: &mut Graph<T>, p: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let bce = bce_loss(g, p, target, cfg.delta)?;
    let dice = dice_loss(g, p, target, cfg.eps)?;
    let a = g.scale(bce, T::of(cfg.alpha));
    let b = g.scale(dice, T::of(cfg.beta));
    g.add(a, b)
}

/// Loss value without recording gradients.
pub fn total_loss_value<T: Float>(p: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let l = total_loss(&mut g, pv, target, cfg)?;
    Ok(g.value(l).data()[0].as_f64())
}
