//! Inverted-residual (MBConv) block: 1x1 expand, 3x3 depthwise, 1x1 project.

use rand::Rng;

use crate::autodiff::{Activation, Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Float;

use super::layers::{scoped, ConvBn, Ctx};

#[derive(Clone, Debug)]
pub struct MBConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub stride: usize,
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub project: ConvBn,
}

impl MBConvBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        expansion: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::config(format!("{name}.stride"), format!("must be 1 or 2, got {stride}")));
        }
        if in_channels == 0 || out_channels == 0 || expansion == 0 {
            return Err(Error::config(name, "channel counts and expansion must be positive"));
        }
        let hidden = expansion * in_channels;
        let expand = ConvBn::new(
            store,
            &scoped(name, "expand"),
            Conv2dSpec::new(in_channels, hidden, 1),
            Some(Activation::Silu),
            rng,
        )?;
        let depthwise = ConvBn::new(
            store,
            &scoped(name, "depthwise"),
            Conv2dSpec::depthwise(hidden, 3).stride(stride),
            Some(Activation::Silu),
            rng,
        )?;
        let project = ConvBn::new(
            store,
            &scoped(name, "project"),
            Conv2dSpec::new(hidden, out_channels, 1),
            None,
            rng,
        )?;
        Ok(Self {
            in_channels,
            out_channels,
            expansion,
            stride,
            expand,
            depthwise,
            project,
        })
    }

    pub fn hidden_channels(&self) -> usize {
        self.expansion * self.in_channels
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?[1];
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "MBConv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let y = self.expand.forward(g, cx, x)?;
        let y = self.depthwise.forward(g, cx, y)?;
        let y = self.project.forward(g, cx, y)?;
        if self.has_skip() {
            g.add(y, x)
        } else {
            Ok(y)
        }
    }

    /// Trainable conv weights only: `C_in*C_e + 9*C_e + C_e*C_out`.
    pub fn conv_weight_count(&self) -> usize {
        let ce = self.hidden_channels();
        self.in_channels * ce + 9 * ce + ce * self.out_channels
    }

    /// Closed-form trainable count: conv weights plus BatchNorm affine terms.
    pub fn param_count(&self) -> usize {
        let ce = self.hidden_channels();
        self.conv_weight_count() + 2 * ce + 2 * ce + 2 * self.out_channels
    }
}

/// Closed-form MBConv count for a configuration, without building it.
pub fn mbconv_param_count(in_channels: usize, out_channels: usize, expansion: usize) -> usize {
    let ce = expansion * in_channels;
    in_channels * ce + 9 * ce + ce * out_channels + 4 * ce + 2 * out_channels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cin: usize, cout: usize, stride: usize) -> (ParamStore<f64>, MBConvBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = MBConvBlock::new(&mut store, "blk", cin, cout, 6, stride, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn worked_example_count() {
        let (store, b) = build(32, 64, 1);
        assert_eq!(b.conv_weight_count(), 20160);
        assert_eq!(b.param_count(), 21056);
        assert_eq!(store.trainable_count(), 21056);
        assert_eq!(mbconv_param_count(32, 64, 6), 21056);
    }

    #[test]
    fn zeroed_convs_give_identity_when_skip_eligible() {
        let (mut store, b) = build(8, 8, 1);
        for (_, p) in store.iter_mut() {
            if p.name.ends_with("conv.weight") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = Tensor::from_fn(vec![2, 8, 4, 4], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = b.forward(&mut g, &Ctx::new(&store, Mode::Eval), xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn stride_two_halves_resolution() {
        let (store, b) = build(4, 8, 2);
        assert!(!b.has_skip());
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 4, 64, 64]));
        let y = b.forward(&mut g, &Ctx::new(&store, Mode::Train), x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 32, 32]);
        let bad = g.constant(Tensor::zeros(vec![1, 5, 8, 8]));
        assert!(b.forward(&mut g, &Ctx::new(&store, Mode::Train), bad).is_err());
    }
}
