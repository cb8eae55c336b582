//! Boundary-aware attention.
//!
//! `B = Laplacian(mean_c F)`, optionally `B' = B + W_g(F_trans)` per token,
//! `M = sigmoid(conv1x1([F || B']))` and `F' = F * (1 + M)`.

use rand::Rng;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Float;

use super::layers::{scoped, Conv2d, Ctx, Linear};
use super::transformer::tokenize;

#[derive(Clone, Debug)]
pub struct BoundaryAttention {
    pub channels: usize,
    /// Per-token projection of transformer features to one boundary logit.
    pub global_proj: Option<Linear>,
    pub mask_conv: Conv2d,
}

impl BoundaryAttention {
    /// `global_dim` is the transformer width when a global projection is used.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        global_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let global_proj = global_dim.map(|d| Linear::new(store, &scoped(name, "w_g"), d, 1, false, rng));
        let mask_conv = Conv2d::new(
            store,
            &scoped(name, "mask"),
            Conv2dSpec::new(channels + 1, 1, 1).with_bias(),
            rng,
        )?;
        Ok(Self {
            channels,
            global_proj,
            mask_conv,
        })
    }

    /// Boundary response `B'` of shape `[N, 1, H, W]`.
    pub fn response<T: Float>(
        &self,
        g: &mut Graph<T>,
        cx: &Ctx<T>,
        f: Var,
        f_trans: Option<Var>,
    ) -> Result<Var> {
        let mean = g.channel_mean(f)?;
        let b = g.laplacian(mean)?;
        match (&self.global_proj, f_trans) {
            (None, _) => Ok(b),
            (Some(_), None) => Err(Error::InvalidArgument(
                "boundary attention has a global projection but no transformer features were given".into(),
            )),
            (Some(wg), Some(t)) => {
                let [n, _, h, w] = g.value(t).dims4()?;
                if g.shape(b)[2..] != [h, w] {
                    return Err(Error::Shape(format!(
                        "transformer features {:?} do not match boundary map {:?}",
                        g.shape(t),
                        g.shape(b)
                    )));
                }
                let tokens = tokenize(g, t)?;
                let proj = wg.forward(g, cx, tokens)?;
                let proj = g.reshape(proj, &[n, 1, h, w])?;
                g.add(b, proj)
            }
        }
    }

    /// Mask `M = sigmoid(conv1x1([F || B']))` in `(0, 1)`.
    pub fn mask<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, f: Var, b_prime: Var) -> Result<Var> {
        let cat = g.concat_channels(&[f, b_prime])?;
        let logits = self.mask_conv.forward(g, cx, cat)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        cx: &Ctx<T>,
        f: Var,
        f_trans: Option<Var>,
    ) -> Result<Var> {
        let c = g.value(f).dims4()?[1];
        if c != self.channels {
            return Err(Error::Shape(format!(
                "boundary attention expects {} channels, got {c}",
                self.channels
            )));
        }
        let b = self.response(g, cx, f, f_trans)?;
        let m = self.mask(g, cx, f, b)?;
        refine(g, f, m)
    }

    pub fn param_count(&self) -> usize {
        self.mask_conv.param_count() + self.global_proj.as_ref().map_or(0, Linear::param_count)
    }
}

/// `F * (1 + M)` with `M: [N, 1, H, W]` broadcast over channels.
pub fn refine<T: Float>(g: &mut Graph<T>, f: Var, m: Var) -> Result<Var> {
    let [n, _, h, w] = g.value(f).dims4()?;
    if g.shape(m) != [n, 1, h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} cannot gate features {:?}",
            g.shape(m),
            g.shape(f)
        )));
    }
    let gate = g.add_scalar(m, T::one());
    g.mul(f, gate)
}
