//! Concurrent spatial and channel squeeze-and-excitation.

use rand::Rng;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Float;

use super::layers::{scoped, Conv2d, Ctx, Linear};

#[derive(Clone, Debug)]
pub struct ScseBlock {
    pub channels: usize,
    pub reduction: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
}

impl ScseBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels < reduction || channels % reduction != 0 {
            return Err(Error::config(
                format!("{name}.channels"),
                format!("{channels} channels must be a positive multiple of the reduction {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            fc1: Linear::new(store, &scoped(name, "cse.fc1"), channels, hidden, true, rng),
            fc2: Linear::new(store, &scoped(name, "cse.fc2"), hidden, channels, true, rng),
            spatial: Conv2d::new(
                store,
                &scoped(name, "sse"),
                Conv2dSpec::new(channels, 1, 1).with_bias(),
                rng,
            )?,
        })
    }

    /// Channel gate `[N, C, 1, 1]` in `[0, 1]`.
    pub fn channel_gate<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let pooled = g.global_avg_pool(x)?;
        let flat = g.reshape(pooled, &[n, self.channels])?;
        let h = self.fc1.forward(g, cx, flat)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, cx, h)?;
        let s = g.sigmoid(h);
        g.reshape(s, &[n, self.channels, 1, 1])
    }

    /// Spatial gate `[N, 1, H, W]` in `[0, 1]`.
    pub fn spatial_gate<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let s = self.spatial.forward(g, cx, x)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?[1];
        if c != self.channels {
            return Err(Error::Shape(format!("SCSE expects {} channels, got {c}", self.channels)));
        }
        let cg = self.channel_gate(g, cx, x)?;
        let sg = self.spatial_gate(g, cx, x)?;
        let a = g.mul(x, cg)?;
        let b = g.mul(x, sg)?;
        g.add(a, b)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count() + self.spatial.param_count()
    }
}
