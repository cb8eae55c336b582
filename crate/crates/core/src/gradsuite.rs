//! Finite-difference suites over every differentiable op, every block and the
//! micro model. Inputs are seeded, channels stay at or below 16 and spatial
//! extents at or below 8x8. The model check runs the micro preset at its
//! nominal input size.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{
    compare_central_differences, finite_diff_gradcheck, random_projection, random_tensor, GradCheckOptions,
};
use crate::autodiff::{Activation, Conv2dSpec, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::model::{MedLiteNet, ModelConfig};
use crate::nn::{
    AsppModule, BoundaryAttention, ConvBn, Ctx, DecoderStage, FusionBlock, GlobalEncoder, MBConvBlock, ScseBlock,
    SepConv, TransformerLayer,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Blocks,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Blocks, Scope::Model];

    pub fn default_tol(self) -> f64 {
        match self {
            Scope::Ops | Scope::Blocks => 1e-3,
            Scope::Model => 2e-3,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Blocks => "blocks",
            Scope::Model => "model",
        })
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "model" => Ok(Scope::Model),
            other => Err(Error::InvalidArgument(format!("unknown scope `{other}` (expected ops, blocks or model)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub tol: f64,
    /// Harness self-test: scale every analytic gradient by 1.1.
    pub corrupt: bool,
    pub seed: u64,
}

impl SuiteOptions {
    pub fn new(scope: Scope) -> Self {
        Self {
            tol: scope.default_tol(),
            corrupt: false,
            seed: 0,
        }
    }

    fn check(&self, max_coords: usize) -> GradCheckOptions {
        GradCheckOptions {
            tol: self.tol,
            max_coords,
            seed: self.seed,
            analytic_scale: if self.corrupt { 1.1 } else { 1.0 },
            ..Default::default()
        }
    }
}

pub fn run_scope(scope: Scope, opts: &SuiteOptions) -> Result<Vec<CheckItem>> {
    match scope {
        Scope::Ops => ops_suite(opts),
        Scope::Blocks => blocks_suite(opts),
        Scope::Model => model_suite(opts),
    }
}

/// Checks `f(store)` against central differences over up to `per_tensor`
/// seeded coordinates of every trainable tensor.
pub fn param_gradcheck(
    store: &ParamStore<f64>,
    f: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    per_tensor: usize,
    opts: &GradCheckOptions,
) -> Result<(f64, usize)> {
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    g.backward(out, Some(&mut work))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9a7a);
    let mut slots = Vec::new();
    for (id, p) in work.iter() {
        if !p.kind.trainable() {
            continue;
        }
        let n = p.value.numel();
        let mut picks = if n <= per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_tensor).into_vec()
        };
        picks.sort_unstable();
        slots.extend(picks.into_iter().map(|i| (id, i)));
    }
    let x0: Vec<f64> = slots.iter().map(|&(id, i)| work.value(id).data()[i]).collect();
    let analytic: Vec<f64> = slots.iter().map(|&(id, i)| work.get(id).grad[i]).collect();
    let all = GradCheckOptions {
        max_coords: usize::MAX,
        ..*opts
    };
    let report = compare_central_differences(
        &x0,
        &analytic,
        |x| {
            let mut s = store.clone();
            for (&(id, i), &v) in slots.iter().zip(x) {
                s.value_mut(id).data_mut()[i] = v;
            }
            let mut g = Graph::new();
            let out = f(&mut g, &s)?;
            Ok(g.value(out).data()[0])
        },
        &all,
    )?;
    Ok((report.max_rel_err, report.checked))
}

struct Runner<'a> {
    opts: &'a SuiteOptions,
    items: Vec<CheckItem>,
}

impl Runner<'_> {
    fn push(&mut self, name: impl Into<String>, max_rel_err: f64, checked: usize) {
        self.items.push(CheckItem {
            name: name.into(),
            max_rel_err,
            checked,
            pass: max_rel_err < self.opts.tol,
        });
    }

    /// Gradient of a random projection of `f(x)` with respect to `x`.
    fn input(&mut self, name: &str, shape: Vec<usize>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<()> {
        let x = random_tensor(shape, self.opts.seed.wrapping_add(self.items.len() as u64));
        let proj_seed = self.items.len() as u64;
        let r = finite_diff_gradcheck(
            |g, v| {
                let y = f(g, v)?;
                random_projection(g, y, proj_seed)
            },
            &x,
            &self.opts.check(48),
        )?;
        self.push(name, r.max_rel_err, r.checked);
        Ok(())
    }

    /// Parameter and input gradients of a block in train mode.
    fn block(
        &mut self,
        name: &str,
        store: &ParamStore<f64>,
        shape: Vec<usize>,
        f: impl Fn(&mut Graph<f64>, &Ctx<f64>, Var) -> Result<Var>,
    ) -> Result<()> {
        let proj_seed = self.items.len() as u64;
        let x = random_tensor(shape, self.opts.seed.wrapping_add(100 + proj_seed));
        let xr = &x;
        let fp = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
            let xv = g.constant(xr.clone());
            let y = f(g, &Ctx::new(s, Mode::Train), xv)?;
            random_projection(g, y, proj_seed)
        };
        let (e, n) = param_gradcheck(store, &fp, 4, &self.opts.check(0))?;
        self.push(format!("{name} (params)"), e, n);
        let r = finite_diff_gradcheck(
            |g, v| {
                let y = f(g, &Ctx::new(store, Mode::Train), v)?;
                random_projection(g, y, proj_seed)
            },
            &x,
            &self.opts.check(32),
        )?;
        self.push(format!("{name} (input)"), r.max_rel_err, r.checked);
        Ok(())
    }
}

fn fixed(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    random_tensor(shape, 10_000 + seed)
}

fn positive(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.5..1.5))
}

fn binary(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(30_000 + seed);
    Tensor::from_fn(shape, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

pub fn ops_suite(opts: &SuiteOptions) -> Result<Vec<CheckItem>> {
    let mut r = Runner { opts, items: Vec::new() };
    let s4 = vec![2, 3, 5, 5];
    r.input("add (broadcast rhs)", s4.clone(), |g, v| {
        let b = g.constant(fixed(vec![3, 1, 1], 0));
        g.add(v, b)
    })?;
    r.input("add (broadcast grad)", vec![3, 1, 1], |g, v| {
        let a = g.constant(fixed(vec![2, 3, 5, 5], 1));
        g.add(a, v)
    })?;
    r.input("mul", s4.clone(), |g, v| {
        let b = g.constant(fixed(vec![2, 3, 5, 5], 2));
        g.mul(v, b)
    })?;
    r.input("mul (broadcast grad)", vec![2, 1, 5, 5], |g, v| {
        let a = g.constant(fixed(vec![2, 3, 5, 5], 3));
        g.mul(a, v)
    })?;
    r.input("mul (self)", vec![7], |g, v| g.mul(v, v))?;
    r.input("scale", vec![6], |g, v| Ok(g.scale(v, -1.7)))?;
    r.input("add_scalar", vec![6], |g, v| Ok(g.add_scalar(v, 0.3)))?;
    r.input("silu", s4.clone(), |g, v| Ok(g.silu(v)))?;
    r.input("relu", s4.clone(), |g, v| Ok(g.relu(v)))?;
    r.input("sigmoid", s4.clone(), |g, v| Ok(g.sigmoid(v)))?;
    r.input("softmax (last axis)", vec![2, 3, 4], |g, v| g.softmax(v, 2))?;
    r.input("softmax (middle axis)", vec![2, 3, 4], |g, v| g.softmax(v, 1))?;
    r.input("matmul (lhs)", vec![2, 3, 4], |g, v| {
        let b = g.constant(fixed(vec![2, 4, 5], 4));
        g.matmul(v, b)
    })?;
    r.input("matmul (rhs)", vec![2, 4, 5], |g, v| {
        let a = g.constant(fixed(vec![2, 3, 4], 5));
        g.matmul(a, v)
    })?;
    r.input("matmul (shared 2-D rhs)", vec![4, 5], |g, v| {
        let a = g.constant(fixed(vec![2, 3, 4], 6));
        g.matmul(a, v)
    })?;
    r.input("linear (input)", vec![2, 3, 6], |g, v| {
        let w = g.constant(fixed(vec![4, 6], 7));
        let b = g.constant(fixed(vec![4], 8));
        g.linear(v, w, Some(b))
    })?;
    r.input("linear (weight)", vec![4, 6], |g, v| {
        let x = g.constant(fixed(vec![2, 3, 6], 9));
        g.linear(x, v, None)
    })?;
    r.input("linear (bias)", vec![4], |g, v| {
        let x = g.constant(fixed(vec![2, 3, 6], 10));
        let w = g.constant(fixed(vec![4, 6], 11));
        g.linear(x, w, Some(v))
    })?;
    r.input("permute", vec![2, 3, 4], |g, v| g.permute(v, &[2, 0, 1]))?;
    r.input("reshape", vec![2, 3, 4], |g, v| g.reshape(v, &[6, 4]))?;
    let convs: [(&str, Conv2dSpec, Vec<usize>); 5] = [
        ("conv2d 3x3", Conv2dSpec::new(3, 4, 3).with_bias(), vec![2, 3, 6, 6]),
        ("conv2d 3x3 stride 2", Conv2dSpec::new(3, 4, 3).stride(2), vec![2, 3, 7, 7]),
        ("conv2d 3x3 dilation 2", Conv2dSpec::new(3, 4, 3).dilation(2), vec![1, 3, 8, 8]),
        ("conv2d depthwise", Conv2dSpec::depthwise(4, 3).stride(2), vec![2, 4, 6, 6]),
        ("conv2d 1x1", Conv2dSpec::new(5, 3, 1).with_bias(), vec![2, 5, 4, 4]),
    ];
    for (k, (name, spec, xs)) in convs.into_iter().enumerate() {
        let ws = spec.weight_shape().to_vec();
        let k = k as u64;
        let wt = fixed(ws.clone(), 20 + k);
        let bt = fixed(vec![spec.out_channels], 30 + k);
        let xt = fixed(xs.clone(), 40 + k);
        r.input(&format!("{name} (input)"), xs, |g, v| {
            let w = g.constant(wt.clone());
            let b = spec.bias.then(|| g.constant(bt.clone()));
            g.conv2d(v, w, b, spec)
        })?;
        r.input(&format!("{name} (weight)"), ws, |g, v| {
            let x = g.constant(xt.clone());
            let b = spec.bias.then(|| g.constant(bt.clone()));
            g.conv2d(x, v, b, spec)
        })?;
        if spec.bias {
            r.input(&format!("{name} (bias)"), vec![spec.out_channels], |g, v| {
                let x = g.constant(xt.clone());
                let w = g.constant(wt.clone());
                g.conv2d(x, w, Some(v), spec)
            })?;
        }
    }
    let (gamma, beta) = (positive(vec![3], 0), fixed(vec![3], 50));
    r.input("batch_norm train (input)", vec![2, 3, 4, 4], |g, v| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        Ok(g.batch_norm_train(v, ga, be, 1e-5)?.0)
    })?;
    let x_bn = fixed(vec![2, 3, 4, 4], 51);
    r.input("batch_norm train (gamma)", vec![3], |g, v| {
        let x = g.constant(x_bn.clone());
        let be = g.constant(beta.clone());
        Ok(g.batch_norm_train(x, v, be, 1e-5)?.0)
    })?;
    let (rm, rv) = (fixed(vec![3], 52), positive(vec![3], 53));
    r.input("batch_norm eval (input)", vec![2, 3, 4, 4], |g, v| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        g.batch_norm_eval(v, ga, be, rm.data(), rv.data(), 1e-5)
    })?;
    r.input("batch_norm eval (beta)", vec![3], |g, v| {
        let x = g.constant(x_bn.clone());
        let ga = g.constant(gamma.clone());
        g.batch_norm_eval(x, ga, v, rm.data(), rv.data(), 1e-5)
    })?;
    let (lg, lb) = (positive(vec![6], 1), fixed(vec![6], 54));
    r.input("layer_norm (input)", vec![2, 3, 6], |g, v| {
        let (ga, be) = (g.constant(lg.clone()), g.constant(lb.clone()));
        g.layer_norm(v, ga, be, 1e-5)
    })?;
    let x_ln = fixed(vec![2, 3, 6], 55);
    r.input("layer_norm (gamma)", vec![6], |g, v| {
        let x = g.constant(x_ln.clone());
        let be = g.constant(lb.clone());
        g.layer_norm(x, v, be, 1e-5)
    })?;
    r.input("upsample_bilinear2x", vec![2, 2, 4, 3], |g, v| g.upsample_bilinear2x(v))?;
    r.input("global_avg_pool", s4.clone(), |g, v| g.global_avg_pool(v))?;
    r.input("concat_channels", vec![2, 2, 3, 3], |g, v| {
        let b = g.constant(fixed(vec![2, 3, 3, 3], 56));
        g.concat_channels(&[b, v, b])
    })?;
    r.input("channel_mean", s4.clone(), |g, v| g.channel_mean(v))?;
    r.input("laplacian", vec![2, 2, 5, 4], |g, v| g.laplacian(v))?;
    r.input("broadcast_to", vec![2, 3, 1, 1], |g, v| g.broadcast_to(v, &[2, 3, 4, 4]))?;
    r.input("sum", vec![3, 4], |g, v| Ok(g.sum(v)))?;
    r.input("mean", vec![3, 4], |g, v| Ok(g.mean(v)))?;
    let target = binary(vec![2, 1, 4, 4], 0);
    r.input("bce_loss", vec![2, 1, 4, 4], |g, v| {
        let p = g.sigmoid(v);
        g.bce_loss(p, &target, 1e-7)
    })?;
    r.input("dice_loss", vec![2, 1, 4, 4], |g, v| {
        let p = g.sigmoid(v);
        g.dice_loss(p, &target, 1e-6)
    })?;
    r.input("total_loss", vec![2, 1, 4, 4], |g, v| {
        let p = g.sigmoid(v);
        total_loss(g, p, &target, &LossConfig::default())
    })?;
    Ok(r.items)
}

pub fn blocks_suite(opts: &SuiteOptions) -> Result<Vec<CheckItem>> {
    let mut r = Runner { opts, items: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut s = ParamStore::new();
    let b = ConvBn::new(&mut s, "cbn", Conv2dSpec::new(4, 6, 3).stride(2), Some(Activation::Silu), &mut rng)?;
    r.block("ConvBn", &s, vec![2, 4, 8, 8], |g, cx, x| b.forward(g, cx, x))?;

    let mut s = ParamStore::new();
    let b = MBConvBlock::new(&mut s, "mb", 4, 4, 2, 1, &mut rng)?;
    r.block("MBConv (residual)", &s, vec![2, 4, 6, 6], |g, cx, x| b.forward(g, cx, x))?;

    let mut s = ParamStore::new();
    let b = MBConvBlock::new(&mut s, "mb", 4, 8, 2, 2, &mut rng)?;
    r.block("MBConv (stride 2)", &s, vec![2, 4, 8, 8], |g, cx, x| b.forward(g, cx, x))?;

    let mut s = ParamStore::new();
    let b = TransformerLayer::new(&mut s, "tl", 8, 2, 2, &mut rng)?;
    r.block("TransformerLayer", &s, vec![2, 5, 8], |g, cx, x| b.forward(g, cx, x))?;

    let mut s = ParamStore::new();
    let b = GlobalEncoder::new(&mut s, "ge", 6, 8, 2, 2, 2, &mut rng)?;
    r.block("GlobalEncoder", &s, vec![2, 6, 3, 3], |g, cx, x| b.forward(g, cx, x))?;

    let mut s = ParamStore::new();
    let b = FusionBlock::new(&mut s, "fu", 6, 8, 8, &mut rng)?;
    let trans = fixed(vec![2, 8, 3, 3], 60);
    r.block("FusionBlock", &s, vec![2, 6, 3, 3], |g, cx, x| {
        let t = g.constant(trans.clone());
        b.forward(g, cx, x, t)
    })?;

    let mut s = ParamStore::new();
    let b = BoundaryAttention::new(&mut s, "baa", 6, Some(8), &mut rng)?;
    let trans = fixed(vec![2, 8, 4, 4], 61);
    r.block("BoundaryAttention (global)", &s, vec![2, 6, 4, 4], |g, cx, x| {
        let t = g.constant(trans.clone());
        b.forward(g, cx, x, Some(t))
    })?;

    let mut s = ParamStore::new();
    let b = BoundaryAttention::new(&mut s, "baa", 6, None, &mut rng)?;
    r.block("BoundaryAttention (local)", &s, vec![2, 6, 5, 5], |g, cx, x| b.forward(g, cx, x, None))?;

    let mut s = ParamStore::new();
    let b = AsppModule::new(&mut s, "aspp", 6, &[1, 2, 3], 4, 8, &mut rng)?;
    r.block("ASPP", &s, vec![2, 6, 6, 6], |g, cx, x| b.forward(g, cx, x))?;

    let mut s = ParamStore::new();
    let b = ScseBlock::new(&mut s, "scse", 8, 4, &mut rng)?;
    r.block("sCSE", &s, vec![2, 8, 4, 4], |g, cx, x| b.forward(g, cx, x))?;

    let mut s = ParamStore::new();
    let b = SepConv::new(&mut s, "sep", 6, 8, &mut rng)?;
    r.block("SepConv", &s, vec![2, 6, 5, 5], |g, cx, x| b.forward(g, cx, x))?;

    let mut s = ParamStore::new();
    let b = DecoderStage::new(&mut s, "dec", 8, 4, 8, 4, &mut rng)?;
    let skip = fixed(vec![2, 4, 8, 8], 62);
    r.block("DecoderStage", &s, vec![2, 8, 4, 4], |g, cx, x| {
        let sk = g.constant(skip.clone());
        b.forward(g, cx, x, sk)
    })?;
    Ok(r.items)
}

/// Micro model, batch 2, train mode, total loss against a seeded mask.
pub fn model_suite(opts: &SuiteOptions) -> Result<Vec<CheckItem>> {
    let mut r = Runner { opts, items: Vec::new() };
    let cfg = ModelConfig::micro();
    let model = MedLiteNet::<f64>::build(&cfg, opts.seed)?;
    let hw = cfg.input_size;
    let x = random_tensor(vec![2, cfg.in_channels, hw, hw], opts.seed.wrapping_add(7));
    let target = binary(vec![2, 1, hw, hw], opts.seed);
    let loss_cfg = LossConfig::default();
    let f = |g: &mut Graph<f64>, s: &ParamStore<f64>, xv: Var| -> Result<Var> {
        let p = model.forward_features_with(g, s, xv, Mode::Train)?.prob;
        total_loss(g, p, &target, &loss_cfg)
    };
    let fp = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let xv = g.constant(x.clone());
        f(g, s, xv)
    };
    let (e, n) = param_gradcheck(&model.store, &fp, 2, &opts.check(0))?;
    r.push("micro model (params)", e, n);
    let rep = finite_diff_gradcheck(|g, v| f(g, &model.store, v), &x, &opts.check(48))?;
    r.push("micro model (input)", rep.max_rel_err, rep.checked);
    Ok(r.items)
}
