//! Parameterized primitive layers. Each layer holds [`ParamId`]s into a
//! [`ParamStore`] and records its forward pass on a [`Graph`].

use rand::Rng;

use crate::autodiff::{Activation, Conv2dSpec, Graph, Mode, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore, StatUpdate};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Forward-pass context: the parameter values and train/eval mode.
pub struct Ctx<'a, T> {
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self { store, mode }
    }

    pub fn param(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(self.store, id)
    }
}

/// Joins a scope prefix and a local name with a dot.
pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: Conv2dSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let shape = spec.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = store.kaiming(scoped(name, "weight"), shape.to_vec(), fan_in, rng);
        let bias = spec.bias.then(|| {
            store.insert(
                scoped(name, "bias"),
                ParamKind::Bias,
                Tensor::zeros(vec![spec.out_channels]),
            )
        });
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(g, self.weight);
        let b = self.bias.map(|b| cx.param(g, b));
        g.conv2d(x, w, b, self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.spec.weight_count()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.insert(scoped(name, "gamma"), ParamKind::Norm, Tensor::ones(vec![channels]));
        let beta = store.insert(scoped(name, "beta"), ParamKind::Norm, Tensor::zeros(vec![channels]));
        let running_mean = store.insert(
            scoped(name, "running_mean"),
            ParamKind::Buffer,
            Tensor::zeros(vec![channels]),
        );
        let running_var = store.insert(
            scoped(name, "running_var"),
            ParamKind::Buffer,
            Tensor::ones(vec![channels]),
        );
        Self {
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let gamma = cx.param(g, self.gamma);
        let beta = cx.param(g, self.beta);
        let eps = T::of(BN_EPS);
        match cx.mode {
            Mode::Train => {
                let (y, batch_mean, batch_var_unbiased) = g.batch_norm_train(x, gamma, beta, eps)?;
                g.record_stat_update(StatUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    batch_mean,
                    batch_var_unbiased,
                });
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                cx.store.value(self.running_mean).data(),
                cx.store.value(self.running_var).data(),
                eps,
            ),
        }
    }

    /// Trainable scalars (gamma and beta; running statistics excluded).
    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.kaiming(
            scoped(name, "weight"),
            vec![out_features, in_features],
            in_features,
            rng,
        );
        let bias = bias.then(|| {
            store.insert(
                scoped(name, "bias"),
                ParamKind::Bias,
                Tensor::zeros(vec![out_features]),
            )
        });
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(g, self.weight);
        let b = self.bias.map(|b| cx.param(g, b));
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + if self.bias.is_some() { self.out_features } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub dim: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            dim,
            gamma: store.insert(scoped(name, "gamma"), ParamKind::Norm, Tensor::ones(vec![dim])),
            beta: store.insert(scoped(name, "beta"), ParamKind::Norm, Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let gamma = cx.param(g, self.gamma);
        let beta = cx.param(g, self.beta);
        g.layer_norm(x, gamma, beta, T::of(LN_EPS))
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Convolution, BatchNorm and an optional activation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Option<Activation>,
}

impl ConvBn {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: Conv2dSpec,
        act: Option<Activation>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, &scoped(name, "conv"), spec, rng)?;
        let bn = BatchNorm2d::new(store, &scoped(name, "bn"), spec.out_channels);
        Ok(Self { conv, bn, act })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, cx, x)?;
        let y = self.bn.forward(g, cx, y)?;
        Ok(match self.act {
            Some(kind) => g.activation(y, kind),
            None => y,
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }
}
