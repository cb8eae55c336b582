//! Decoder stages: 2x upsample, skip concatenation, two depthwise-separable
//! convs and SCSE recalibration.

use rand::Rng;

use crate::autodiff::{Activation, Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Float;

use super::layers::{scoped, BatchNorm2d, Conv2d, Ctx};
use super::scse::ScseBlock;

/// Depthwise 3x3, pointwise 1x1, BatchNorm, SiLU.
#[derive(Clone, Debug)]
pub struct SepConv {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub bn: BatchNorm2d,
}

impl SepConv {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            depthwise: Conv2d::new(store, &scoped(name, "dw"), Conv2dSpec::depthwise(in_channels, 3), rng)?,
            pointwise: Conv2d::new(
                store,
                &scoped(name, "pw"),
                Conv2dSpec::new(in_channels, out_channels, 1),
                rng,
            )?,
            bn: BatchNorm2d::new(store, &scoped(name, "bn"), out_channels),
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(g, cx, x)?;
        let y = self.pointwise.forward(g, cx, y)?;
        let y = self.bn.forward(g, cx, y)?;
        Ok(g.activation(y, Activation::Silu))
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count() + self.bn.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub in_channels: usize,
    pub skip_channels: usize,
    pub out_channels: usize,
    pub conv1: SepConv,
    pub conv2: SepConv,
    pub scse: ScseBlock,
}

impl DecoderStage {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        skip_channels: usize,
        out_channels: usize,
        scse_reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            in_channels,
            skip_channels,
            out_channels,
            conv1: SepConv::new(store, &scoped(name, "conv1"), in_channels + skip_channels, out_channels, rng)?,
            conv2: SepConv::new(store, &scoped(name, "conv2"), out_channels, out_channels, rng)?,
            scse: ScseBlock::new(store, &scoped(name, "scse"), out_channels, scse_reduction, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var, skip: Var) -> Result<Var> {
        let [_, c, h, w] = g.value(x).dims4()?;
        let [_, cs, hs, ws] = g.value(skip).dims4()?;
        if c != self.in_channels || cs != self.skip_channels || (hs, ws) != (2 * h, 2 * w) {
            return Err(Error::Shape(format!(
                "decoder stage expects input [N,{},h,w] and skip [N,{},2h,2w], got {:?} and {:?}",
                self.in_channels,
                self.skip_channels,
                g.shape(x),
                g.shape(skip)
            )));
        }
        let up = g.upsample_bilinear2x(x)?;
        let cat = g.concat_channels(&[up, skip])?;
        let y = self.conv1.forward(g, cx, cat)?;
        let y = self.conv2.forward(g, cx, y)?;
        self.scse.forward(g, cx, y)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.scse.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::random_tensor;
    use crate::autodiff::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn doubles_resolution_and_counts_match() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = DecoderStage::new(&mut store, "dec", 16, 8, 8, 8, &mut rng).unwrap();
        assert_eq!(d.param_count(), store.trainable_count());
        // (24*9 + 24*8 + 16) + (8*9 + 8*8 + 16) + (8*1+1 + 1*8+8 + 8+1)
        assert_eq!(d.param_count(), 424 + 152 + 34);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(vec![2, 16, 4, 4], 1));
        let s = g.constant(random_tensor(vec![2, 8, 8, 8], 2));
        let y = d.forward(&mut g, &Ctx::new(&store, Mode::Train), x, s).unwrap();
        assert_eq!(g.shape(y), &[2, 8, 8, 8]);
        let bad = g.constant(random_tensor(vec![2, 8, 4, 4], 3));
        assert!(d.forward(&mut g, &Ctx::new(&store, Mode::Train), x, bad).is_err());
    }
}
