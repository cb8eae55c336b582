//! Atrous spatial pyramid pooling: dilated 3x3 branches plus a pooled
//! branch, concatenated and fused by a 1x1 conv.

use rand::Rng;

use crate::autodiff::{Activation, Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Float;

use super::layers::{scoped, Conv2d, ConvBn, Ctx};

#[derive(Clone, Debug)]
pub struct AsppModule {
    pub in_channels: usize,
    pub rates: Vec<usize>,
    pub branches: Vec<ConvBn>,
    pub pool_conv: Conv2d,
    pub fuse: ConvBn,
}

impl AsppModule {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        rates: &[usize],
        branch_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::config("aspp.rates", "at least one rate is required"));
        }
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                ConvBn::new(
                    store,
                    &scoped(name, &format!("branch{i}")),
                    Conv2dSpec::new(in_channels, branch_channels, 3).dilation(r),
                    Some(Activation::Relu),
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pool_conv = Conv2d::new(
            store,
            &scoped(name, "pool"),
            Conv2dSpec::new(in_channels, branch_channels, 1).with_bias(),
            rng,
        )?;
        let fuse = ConvBn::new(
            store,
            &scoped(name, "fuse"),
            Conv2dSpec::new((rates.len() + 1) * branch_channels, out_channels, 1),
            Some(Activation::Relu),
            rng,
        )?;
        Ok(Self {
            in_channels,
            rates: rates.to_vec(),
            branches,
            pool_conv,
            fuse,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.conv.spec.out_channels
    }

    /// The concatenated branch outputs before fusion.
    pub fn branch_outputs<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Vec<Var>> {
        let [n, c, h, w] = g.value(x).dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "ASPP expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let mut outs = self
            .branches
            .iter()
            .map(|b| b.forward(g, cx, x))
            .collect::<Result<Vec<_>>>()?;
        let pooled = g.global_avg_pool(x)?;
        let pooled = self.pool_conv.forward(g, cx, pooled)?;
        let pooled = g.relu(pooled);
        let bc = self.pool_conv.spec.out_channels;
        outs.push(g.broadcast_to(pooled, &[n, bc, h, w])?);
        Ok(outs)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let outs = self.branch_outputs(g, cx, x)?;
        let cat = g.concat_channels(&outs)?;
        self.fuse.forward(g, cx, cat)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(ConvBn::param_count).sum::<usize>()
            + self.pool_conv.param_count()
            + self.fuse.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::conv::conv2d_reference;
    use crate::autodiff::gradcheck::random_tensor;
    use crate::autodiff::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(c: usize, bc: usize, out: usize) -> (ParamStore<f64>, AsppModule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = AsppModule::new(&mut store, "aspp", c, &[1, 4, 8, 12], bc, out, &mut rng).unwrap();
        (store, a)
    }

    #[test]
    fn keeps_spatial_size_with_five_branches() {
        let (store, a) = build(16, 8, 16);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(vec![2, 16, 8, 8], 1));
        let cx = Ctx::new(&store, Mode::Train);
        assert_eq!(a.branch_outputs(&mut g, &cx, x).unwrap().len(), 5);
        let y = a.forward(&mut g, &cx, x).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 8, 8]);
        assert_eq!(a.param_count(), store.trainable_count());
    }

    #[test]
    fn constant_input_gives_constant_branches_with_equal_weights() {
        // center-only taps so zero padding never enters the sum
        let (mut store, a) = build(4, 4, 8);
        for b in &a.branches {
            let w = store.value_mut(b.conv.weight);
            let d = w.data_mut();
            d.fill(0.0);
            d.chunks_mut(9).for_each(|k| k[4] = 0.1);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 4, 8, 8], 2.0));
        let outs = a.branch_outputs(&mut g, &Ctx::new(&store, Mode::Eval), x).unwrap();
        let first = g.value(outs[0]).clone();
        for o in &outs {
            for plane in g.value(*o).data().chunks(64) {
                assert!(plane.iter().all(|v| *v == plane[0]));
            }
        }
        for o in &outs[..4] {
            assert_eq!(g.value(*o), &first);
        }
    }

    #[test]
    fn rate_one_branch_equals_dense_conv() {
        let (store, a) = build(4, 4, 8);
        let x = random_tensor(vec![1, 4, 8, 8], 7);
        let b0 = &a.branches[0];
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let cx = Ctx::new(&store, Mode::Eval);
        let conv = b0.conv.forward(&mut g, &cx, xv).unwrap();
        let dense = conv2d_reference(&x, store.value(b0.conv.weight), None, &Conv2dSpec::new(4, 4, 3)).unwrap();
        assert!(g.value(conv).max_abs_diff(&dense) < 1e-6);
    }
}
