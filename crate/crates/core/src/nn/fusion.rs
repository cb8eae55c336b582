//! Local-global fusion at the bottleneck:
//! `F_lg = ReLU(W1 * [F_conv || F_trans] + b1) + F_conv + F_trans`.

use rand::Rng;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Float;

use super::layers::{scoped, Conv2d, Ctx};

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub dim: usize,
    /// 1x1 convs bringing each input to `dim` channels, present only when
    /// the input width differs.
    pub align_conv: Option<Conv2d>,
    pub align_trans: Option<Conv2d>,
    pub fuse: Conv2d,
}

impl FusionBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        conv_channels: usize,
        trans_channels: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut align = |tag: &str, c: usize| -> Result<Option<Conv2d>> {
            (c != dim)
                .then(|| Conv2d::new(store, &scoped(name, tag), Conv2dSpec::new(c, dim, 1).with_bias(), rng))
                .transpose()
        };
        let align_conv = align("align_conv", conv_channels)?;
        let align_trans = align("align_trans", trans_channels)?;
        let fuse = Conv2d::new(
            store,
            &scoped(name, "fuse"),
            Conv2dSpec::new(2 * dim, dim, 1).with_bias(),
            rng,
        )?;
        Ok(Self {
            dim,
            align_conv,
            align_trans,
            fuse,
        })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        cx: &Ctx<T>,
        f_conv: Var,
        f_trans: Var,
    ) -> Result<Var> {
        let a = match &self.align_conv {
            Some(c) => c.forward(g, cx, f_conv)?,
            None => f_conv,
        };
        let b = match &self.align_trans {
            Some(c) => c.forward(g, cx, f_trans)?,
            None => f_trans,
        };
        if g.shape(a) != g.shape(b) {
            return Err(Error::Shape(format!(
                "fusion inputs differ after alignment: {:?} vs {:?}",
                g.shape(a),
                g.shape(b)
            )));
        }
        let cat = g.concat_channels(&[a, b])?;
        let y = self.fuse.forward(g, cx, cat)?;
        let y = g.relu(y);
        let y = g.add(y, a)?;
        g.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.fuse.param_count()
            + self.align_conv.as_ref().map_or(0, Conv2d::param_count)
            + self.align_trans.as_ref().map_or(0, Conv2d::param_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::random_tensor;
    use crate::autodiff::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(c: usize, d: usize) -> (ParamStore<f64>, FusionBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = FusionBlock::new(&mut store, "fusion", c, d, d, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn zero_inputs_give_zero() {
        let (store, b) = block(8, 8);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![1, 8, 4, 4]));
        let y = b.forward(&mut g, &Ctx::new(&store, Mode::Eval), z, z).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_fuse_weights_leave_residual_sum() {
        let (mut store, b) = block(8, 8);
        store.value_mut(b.fuse.weight).data_mut().fill(0.0);
        let (x, t) = (random_tensor(vec![2, 8, 4, 4], 1), random_tensor(vec![2, 8, 4, 4], 2));
        let mut g = Graph::new();
        let (xv, tv) = (g.constant(x.clone()), g.constant(t.clone()));
        let y = b.forward(&mut g, &Ctx::new(&store, Mode::Eval), xv, tv).unwrap();
        for ((o, a), c) in g.value(y).data().iter().zip(x.data()).zip(t.data()) {
            assert_eq!(*o, a + c);
        }
    }

    #[test]
    fn excess_over_residual_is_nonnegative() {
        let (store, b) = block(8, 8);
        let (x, t) = (random_tensor(vec![1, 8, 4, 4], 3), random_tensor(vec![1, 8, 4, 4], 4));
        let mut g = Graph::new();
        let (xv, tv) = (g.constant(x.clone()), g.constant(t.clone()));
        let y = b.forward(&mut g, &Ctx::new(&store, Mode::Eval), xv, tv).unwrap();
        for ((o, a), c) in g.value(y).data().iter().zip(x.data()).zip(t.data()) {
            assert!(o - a - c >= -1e-12);
        }
    }

    #[test]
    fn aligns_mismatched_widths() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = FusionBlock::new(&mut store, "fusion", 16, 8, 8, &mut rng).unwrap();
        assert!(b.align_conv.is_some() && b.align_trans.is_none());
        assert_eq!(b.param_count(), store.trainable_count());
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 16, 2, 2]));
        let t = g.constant(Tensor::zeros(vec![1, 8, 2, 2]));
        let y = b.forward(&mut g, &Ctx::new(&store, Mode::Eval), x, t).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 2, 2]);
        let t_bad = g.constant(Tensor::zeros(vec![1, 8, 4, 4]));
        assert!(b.forward(&mut g, &Ctx::new(&store, Mode::Eval), x, t_bad).is_err());
    }
}
