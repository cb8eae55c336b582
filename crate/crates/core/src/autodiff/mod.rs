//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every op evaluates eagerly, stores its
//! output value, and records what backward needs. [`Graph::backward`] walks the
//! tape in exact reverse append order, so inputs always precede outputs and the
//! graph is acyclic by construction.

pub mod conv;
pub mod gradcheck;

use std::collections::HashMap;

pub use conv::Conv2dSpec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, StatUpdate};
use crate::tensor::{strides_of, Float, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add { a: Var, b: Var, map: Option<Vec<usize>> },
    Mul { a: Var, b: Var, map: Option<Vec<usize>> },
    Scale { a: Var, s: T },
    AddScalar { a: Var },
    Act { a: Var, kind: Activation },
    Softmax { a: Var, axis: usize },
    Matmul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Upsample2x { a: Var },
    GlobalAvgPool { a: Var },
    Concat { inputs: Vec<Var> },
    ChannelMean { a: Var },
    Laplacian { a: Var },
    BroadcastTo { a: Var, map: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Bce { p: Var, target: Vec<T>, delta: T },
    Dice { p: Var, target: Vec<T>, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of the leaves reached by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    adj: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to a leaf (input or parameter) node.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.adj.get(v.0).and_then(|a| a.as_deref())
    }
}

/// Offsets into `from` for every element of `to`, broadcasting right-aligned
/// size-1 (or missing) dimensions.
fn broadcast_map(to: &[usize], from: &[usize]) -> Result<Vec<usize>> {
    if from.len() > to.len() {
        return Err(Error::Shape(format!("cannot broadcast {from:?} to {to:?}")));
    }
    let lead = to.len() - from.len();
    let from_strides = strides_of(from);
    let mut strides = vec![0usize; to.len()];
    for (i, (&f, &s)) in from.iter().zip(&from_strides).enumerate() {
        let t = to[lead + i];
        if f == t {
            strides[lead + i] = s;
        } else if f != 1 {
            return Err(Error::Shape(format!(
                "cannot broadcast {from:?} to {to:?}: dim {} is {f}, expected 1 or {t}",
                lead + i
            )));
        }
    }
    let numel: usize = to.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; to.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < to[d] {
                break;
            }
            off -= strides[d] * to[d];
            idx[d] = 0;
        }
    }
    Ok(map)
}

fn permute_data<T: Float>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Source index pair and blend weight for 2x bilinear upsampling with
/// half-pixel centers and edge clamping.
fn upsample_taps<T: Float>(extent: usize) -> Vec<(usize, usize, T)> {
    (0..2 * extent)
        .map(|j| {
            let src = ((j as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, T::of(src - i0 as f64))
        })
        .collect()
}

fn softmax_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn clamp_prob<T: Float>(p: T, delta: T) -> T {
    p.max(delta).min(T::one() - delta)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf whose gradient is reported in [`Gradients`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter, valued at the first call. Repeated
    /// calls return the same node; backward accumulates into the store's
    /// gradient buffer.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            requires_grad: p.kind.trainable(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn record_stat_update(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    // ---------------------------------------------------------------- elementwise

    /// `a + b`, with `b` broadcast (right-aligned) to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let map = (sa != sb).then(|| broadcast_map(&sa, &sb)).transpose()?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = match &map {
            None => av.iter().zip(bv).map(|(x, y)| *x + *y).collect(),
            Some(m) => av.iter().zip(m).map(|(x, &j)| *x + bv[j]).collect(),
        };
        Ok(self.push(Tensor::new(sa, data)?, Op::Add { a, b, map }, &[a, b]))
    }

    /// `a * b` elementwise, with `b` broadcast to the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let map = (sa != sb).then(|| broadcast_map(&sa, &sb)).transpose()?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = match &map {
            None => av.iter().zip(bv).map(|(x, y)| *x * *y).collect(),
            Some(m) => av.iter().zip(m).map(|(x, &j)| *x * bv[j]).collect(),
        };
        Ok(self.push(Tensor::new(sa, data)?, Op::Mul { a, b, map }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale { a, s }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar { a }, &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Silu => self.value(a).map(|x| x * sigmoid(x)),
            Activation::Relu => self.value(a).map(|x| x.max(T::zero())),
            Activation::Sigmoid => self.value(a).map(sigmoid),
        };
        self.push(value, Op::Act { a, kind }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Silu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = softmax_dims(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::new(shape, y)?, Op::Softmax { a, axis }, &[a]))
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product `[..., M, K] x [..., K, P]`. A 2-D right operand
    /// is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, p, batch, shared) = matmul_dims(&sa, &sb)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * p];
        if shared {
            T::gemm(
                batch * m,
                k,
                p,
                T::one(),
                (av, k as isize, 1),
                (bv, p as isize, 1),
                T::zero(),
                (&mut out, p as isize, 1),
            );
        } else {
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    p,
                    T::one(),
                    (&av[i * m * k..][..m * k], k as isize, 1),
                    (&bv[i * k * p..][..k * p], p as isize, 1),
                    T::zero(),
                    (&mut out[i * m * p..][..m * p], p as isize, 1),
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, p]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Matmul { a, b }, &[a, b]))
    }

    /// `x W^T + b` over the last axis, with `W: [out, in]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let din = *sx.last().ok_or_else(|| Error::Shape("linear input is a scalar".into()))?;
        if sw.len() != 2 || sw[1] != din {
            return Err(Error::Shape(format!(
                "linear weight {sw:?} incompatible with input last dim {din}"
            )));
        }
        let dout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::Shape(format!(
                    "linear bias {:?}, expected [{dout}]",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            (self.value(x).data(), din as isize, 1),
            (self.value(w).data(), 1, din as isize),
            T::zero(),
            (&mut out, dout as isize, 1),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, bb)| *o += *bb);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, &inputs))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute { a, perm: perm.to_vec() },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    // ---------------------------------------------------------------- convolution & norms

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let value = conv::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        )?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    fn check_affine(&self, c: usize, gamma: Var, beta: Var, what: &str) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::Shape(format!(
                    "{what} {name} shape {:?}, expected [{c}]",
                    self.shape(v)
                )));
            }
        }
        Ok(())
    }

    /// Train-mode BatchNorm over (N, H, W) per channel.
    ///
    /// Returns the output plus the batch mean and unbiased batch variance for
    /// the caller to fold into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let [n, c, h, w] = self.value(x).dims4()?;
        self.check_affine(c, gamma, beta, "batchnorm")?;
        let m = n * h * w;
        if m == 0 {
            return Err(Error::Shape("batchnorm over an empty batch".into()));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xv[(b * c + ch) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0;
            for b in 0..n {
                for v in &xv[(b * c + ch) * hw..][..hw] {
                    ss += (v.as_f64() - mu) * (v.as_f64() - mu);
                }
            }
            mean[ch] = T::of(mu);
            var[ch] = T::of(ss / m as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize_channels(x, gamma, beta, &mean, &inv_std, n, c, hw);
        let unbiased = if m > 1 {
            let f = T::of(m as f64 / (m - 1) as f64);
            var.iter().map(|v| *v * f).collect()
        } else {
            var.clone()
        };
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            &[x, gamma, beta],
        );
        Ok((v, mean, unbiased))
    }

    /// Eval-mode BatchNorm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        self.check_affine(c, gamma, beta, "batchnorm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("batchnorm running statistics length".into()));
        }
        let inv_std: Vec<T> = running_var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (out, xhat) = self.normalize_channels(x, gamma, beta, running_mean, &inv_std, n, c, h * w);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            &[x, gamma, beta],
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_channels(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        hw: usize,
    ) -> (Vec<T>, Vec<T>) {
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        (out, xhat)
    }

    /// LayerNorm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        self.check_affine(d, gamma, beta, "layer_norm")?;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let df = T::of(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    // ---------------------------------------------------------------- spatial

    /// 2x bilinear upsampling, half-pixel centers, edge-clamped.
    pub fn upsample_bilinear2x(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::Shape("upsample of an empty plane".into()));
        }
        let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x[plane * h * w..][..h * w];
            let dst = &mut out[plane * ho * wo..][..ho * wo];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n, c, ho, wo], out)?, Op::Upsample2x { a }, &[a]))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::Shape("global_avg_pool of an empty plane".into()));
        }
        let x = self.value(a).data();
        let out = (0..n * c)
            .map(|p| x[p * hw..(p + 1) * hw].iter().copied().sum::<T>() / T::of(hw as f64))
            .collect();
        Ok(self.push(Tensor::new(vec![n, c, 1, 1], out)?, Op::GlobalAvgPool { a }, &[a]))
    }

    /// Concatenates NCHW tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of an empty list".into()))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut total = 0;
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: input {:?} does not match N,H,W of {:?}",
                    self.shape(v),
                    self.shape(first)
                )));
            }
            total += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, total, h, w], out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// Mean over the channel axis: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4()?;
        let hw = h * w;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n * hw];
        let inv = T::one() / T::of(c as f64);
        for b in 0..n {
            for ch in 0..c {
                let src = &x[(b * c + ch) * hw..][..hw];
                out[b * hw..(b + 1) * hw]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, v)| *o += *v);
            }
            out[b * hw..(b + 1) * hw].iter_mut().for_each(|o| *o *= inv);
        }
        Ok(self.push(Tensor::new(vec![n, 1, h, w], out)?, Op::ChannelMean { a }, &[a]))
    }

    /// Per-channel 4-neighbour Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with
    /// replicate (edge-clamped) borders, so constant planes map to zero.
    pub fn laplacian(&mut self, a: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4()?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        let four = T::of(4.0);
        for plane in 0..n * c {
            let src = &x[plane * h * w..][..h * w];
            let dst = &mut out[plane * h * w..][..h * w];
            for y in 0..h {
                for xx in 0..w {
                    let up = src[y.saturating_sub(1) * w + xx];
                    let down = src[(y + 1).min(h - 1) * w + xx];
                    let left = src[y * w + xx.saturating_sub(1)];
                    let right = src[y * w + (xx + 1).min(w - 1)];
                    dst[y * w + xx] = up + down + left + right - four * src[y * w + xx];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, Op::Laplacian { a }, &[a]))
    }

    /// Broadcasts `a` (right-aligned, size-1 dims) to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let map = broadcast_map(shape, self.shape(a))?;
        let x = self.value(a).data();
        let data = map.iter().map(|&j| x[j]).collect();
        Ok(self.push(
            Tensor::new(shape.to_vec(), data)?,
            Op::BroadcastTo { a, map },
            &[a],
        ))
    }

    // ---------------------------------------------------------------- reductions & losses

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / T::of(t.numel().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    fn check_target(&self, p: Var, target: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape(p) != target.shape() {
            return Err(Error::Shape(format!(
                "{what}: prediction shape {:?} differs from target shape {:?}",
                self.shape(p),
                target.shape()
            )));
        }
        Ok(())
    }

    /// Mean binary cross-entropy with `p` clamped to `[delta, 1 - delta]`.
    pub fn bce_loss(&mut self, p: Var, target: &Tensor<T>, delta: T) -> Result<Var> {
        self.check_target(p, target, "bce_loss")?;
        let pv = self.value(p).data();
        let n = T::of(pv.len().max(1) as f64);
        let mut s = 0.0;
        for (pi, gi) in pv.iter().zip(target.data()) {
            let pc = clamp_prob(*pi, delta);
            s += (*gi * pc.ln() + (T::one() - *gi) * (T::one() - pc).ln()).as_f64();
        }
        Ok(self.push(
            Tensor::scalar(-T::of(s) / n),
            Op::Bce {
                p,
                target: target.data().to_vec(),
                delta,
            },
            &[p],
        ))
    }

    /// Soft Dice loss `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`,
    /// computed per sample (leading axis) and averaged over the batch.
    pub fn dice_loss(&mut self, p: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        self.check_target(p, target, "dice_loss")?;
        let shape = self.shape(p).to_vec();
        let pv = self.value(p).data();
        let (batch, per) = batch_split(&shape, pv.len());
        let mut total = T::zero();
        for s in 0..batch {
            let (ps, gs) = (&pv[s * per..(s + 1) * per], &target.data()[s * per..(s + 1) * per]);
            let (inter, sp, sg) = dice_terms(ps, gs);
            total += T::one() - (T::of(2.0) * inter + eps) / (sp + sg + eps);
        }
        Ok(self.push(
            Tensor::scalar(total / T::of(batch as f64)),
            Op::Dice {
                p,
                target: target.data().to_vec(),
                eps,
            },
            &[p],
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    ///
    /// Parameter gradients are added (`+=`) into `store`; calling twice without
    /// `zero_grad` doubles them. Input-leaf gradients are returned.
    pub fn backward(&self, loss: Var, store: Option<&mut ParamStore<T>>) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            adj[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) {
                adj[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut adj);
        }
        if let Some(store) = store {
            for (id, v) in &self.param_vars {
                if let Some(g) = &adj[v.0] {
                    store
                        .get_mut(*id)
                        .grad
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += *b);
                }
            }
        }
        Ok(Gradients { adj })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::Add { a, b, map } => {
                if let Some(da) = acc(adj, nodes, *a) {
                    add_into(da, g);
                }
                if let Some(db) = acc(adj, nodes, *b) {
                    match map {
                        None => add_into(db, g),
                        Some(m) => m.iter().zip(g).for_each(|(&j, gv)| db[j] += *gv),
                    }
                }
            }
            Op::Mul { a, b, map } => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = acc(adj, nodes, *a) {
                    match map {
                        None => da.iter_mut().zip(g).zip(bv).for_each(|((d, gv), y)| *d += *gv * *y),
                        Some(m) => da
                            .iter_mut()
                            .zip(g)
                            .zip(m)
                            .for_each(|((d, gv), &j)| *d += *gv * bv[j]),
                    }
                }
                if let Some(db) = acc(adj, nodes, *b) {
                    match map {
                        None => db.iter_mut().zip(g).zip(av).for_each(|((d, gv), x)| *d += *gv * *x),
                        Some(m) => m
                            .iter()
                            .zip(g)
                            .zip(av)
                            .for_each(|((&j, gv), x)| db[j] += *gv * *x),
                    }
                }
            }
            Op::Scale { a, s } => {
                if let Some(da) = acc(adj, nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += *gv * *s);
                }
            }
            Op::AddScalar { a } => {
                if let Some(da) = acc(adj, nodes, *a) {
                    add_into(da, g);
                }
            }
            Op::Act { a, kind } => {
                let (x, y) = (val(*a), node.value.data());
                if let Some(da) = acc(adj, nodes, *a) {
                    for i in 0..da.len() {
                        let d = match kind {
                            Activation::Silu => {
                                let s = sigmoid(x[i]);
                                s * (T::one() + x[i] * (T::one() - s))
                            }
                            Activation::Relu => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Activation::Sigmoid => y[i] * (T::one() - y[i]),
                        };
                        da[i] += g[i] * d;
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = softmax_dims(node.value.shape(), *axis);
                if let Some(da) = acc(adj, nodes, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                da[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, p, batch, shared) = matmul_dims(sa, sb).expect("checked in forward");
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = acc(adj, nodes, *a) {
                    // dA = dC B^T
                    for i in 0..batch {
                        let boff = if shared { 0 } else { i * k * p };
                        T::gemm(
                            m,
                            p,
                            k,
                            T::one(),
                            (&g[i * m * p..][..m * p], p as isize, 1),
                            (&bv[boff..][..k * p], 1, p as isize),
                            T::one(),
                            (&mut da[i * m * k..][..m * k], k as isize, 1),
                        );
                    }
                }
                if let Some(db) = acc(adj, nodes, *b) {
                    // dB += A^T dC
                    if shared {
                        T::gemm(
                            k,
                            batch * m,
                            p,
                            T::one(),
                            (av, 1, k as isize),
                            (g, p as isize, 1),
                            T::one(),
                            (db, p as isize, 1),
                        );
                    } else {
                        for i in 0..batch {
                            T::gemm(
                                k,
                                m,
                                p,
                                T::one(),
                                (&av[i * m * k..][..m * k], 1, k as isize),
                                (&g[i * m * p..][..m * p], p as isize, 1),
                                T::one(),
                                (&mut db[i * k * p..][..k * p], p as isize, 1),
                            );
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let sw = nodes[w.0].value.shape();
                let (dout, din) = (sw[0], sw[1]);
                let rows = g.len() / dout;
                let (xv, wv) = (val(*x), val(*w));
                if let Some(dx) = acc(adj, nodes, *x) {
                    T::gemm(
                        rows,
                        dout,
                        din,
                        T::one(),
                        (g, dout as isize, 1),
                        (wv, din as isize, 1),
                        T::one(),
                        (dx, din as isize, 1),
                    );
                }
                if let Some(dw) = acc(adj, nodes, *w) {
                    T::gemm(
                        dout,
                        rows,
                        din,
                        T::one(),
                        (g, 1, dout as isize),
                        (xv, din as isize, 1),
                        T::one(),
                        (dw, din as isize, 1),
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = acc(adj, nodes, *b) {
                        for row in g.chunks(dout) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                if let Some(da) = acc(adj, nodes, *a) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (back, _) = permute_data(g, node.value.shape(), &inv);
                    add_into(da, &back);
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = acc(adj, nodes, *a) {
                    add_into(da, g);
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let need = (
                    nodes[x.0].requires_grad,
                    nodes[w.0].requires_grad,
                    b.is_some_and(|b| nodes[b.0].requires_grad),
                );
                let grads = conv::conv2d_backward(&nodes[x.0].value, &nodes[w.0].value, spec, g, need);
                if let (Some(dx), Some(gx)) = (acc(adj, nodes, *x), grads.input) {
                    add_into(dx, &gx);
                }
                if let (Some(dw), Some(gw)) = (acc(adj, nodes, *w), grads.weight) {
                    add_into(dw, &gw);
                }
                if let Some(b) = b {
                    if let (Some(db), Some(gb)) = (acc(adj, nodes, *b), grads.bias) {
                        add_into(db, &gb);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = node.value.dims4().expect("4-D");
                let hw = h * w;
                let m = T::of((n * hw) as f64);
                let gv = val(*gamma);
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            sum_g[ch] += g[i].as_f64();
                            sum_gx[ch] += (g[i] * xhat[i]).as_f64();
                        }
                    }
                }
                let sum_g: Vec<T> = sum_g.into_iter().map(T::of).collect();
                let sum_gx: Vec<T> = sum_gx.into_iter().map(T::of).collect();
                if let Some(dx) = acc(adj, nodes, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for i in off..off + hw {
                                dx[i] += if *train {
                                    k / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
                if let Some(dg) = acc(adj, nodes, *gamma) {
                    add_into(dg, &sum_gx);
                }
                if let Some(db) = acc(adj, nodes, *beta) {
                    add_into(db, &sum_g);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().unwrap();
                let df = T::of(d as f64);
                let gv = val(*gamma);
                if let Some(dx) = acc(adj, nodes, *x) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            dx[r * d + j] += *is / df * (df * dxh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                }
                if let Some(dg) = acc(adj, nodes, *gamma) {
                    for (i, gi) in g.iter().enumerate() {
                        dg[i % d] += *gi * xhat[i];
                    }
                }
                if let Some(db) = acc(adj, nodes, *beta) {
                    for (i, gi) in g.iter().enumerate() {
                        db[i % d] += *gi;
                    }
                }
            }
            Op::Upsample2x { a } => {
                let [n, c, h, w] = nodes[a.0].value.dims4().expect("4-D");
                let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
                let wo = 2 * w;
                if let Some(da) = acc(adj, nodes, *a) {
                    for plane in 0..n * c {
                        let src = &g[plane * 4 * h * w..][..4 * h * w];
                        let dst = &mut da[plane * h * w..][..h * w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = src[oy * wo + ox];
                                let (top, bot) = (gv * (T::one() - fy), gv * fy);
                                dst[y0 * w + x0] += top * (T::one() - fx);
                                dst[y0 * w + x1] += top * fx;
                                dst[y1 * w + x0] += bot * (T::one() - fx);
                                dst[y1 * w + x1] += bot * fx;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { a } => {
                let [_, _, h, w] = nodes[a.0].value.dims4().expect("4-D");
                let hw = h * w;
                let inv = T::one() / T::of(hw as f64);
                if let Some(da) = acc(adj, nodes, *a) {
                    for (p, gv) in g.iter().enumerate() {
                        da[p * hw..(p + 1) * hw].iter_mut().for_each(|d| *d += *gv * inv);
                    }
                }
            }
            Op::Concat { inputs } => {
                let [n, total, h, w] = node.value.dims4().expect("4-D");
                let hw = h * w;
                let mut c0 = 0;
                for v in inputs {
                    let c = nodes[v.0].value.shape()[1];
                    if let Some(dv) = acc(adj, nodes, *v) {
                        for b in 0..n {
                            add_into(
                                &mut dv[b * c * hw..(b + 1) * c * hw],
                                &g[(b * total + c0) * hw..][..c * hw],
                            );
                        }
                    }
                    c0 += c;
                }
            }
            Op::ChannelMean { a } => {
                let [n, c, h, w] = nodes[a.0].value.dims4().expect("4-D");
                let hw = h * w;
                let inv = T::one() / T::of(c as f64);
                if let Some(da) = acc(adj, nodes, *a) {
                    for b in 0..n {
                        for ch in 0..c {
                            da[(b * c + ch) * hw..][..hw]
                                .iter_mut()
                                .zip(&g[b * hw..(b + 1) * hw])
                                .for_each(|(d, gv)| *d += *gv * inv);
                        }
                    }
                }
            }
            Op::Laplacian { a } => {
                let [n, c, h, w] = node.value.dims4().expect("4-D");
                let four = T::of(4.0);
                if let Some(da) = acc(adj, nodes, *a) {
                    for plane in 0..n * c {
                        let src = &g[plane * h * w..][..h * w];
                        let dst = &mut da[plane * h * w..][..h * w];
                        for y in 0..h {
                            for x in 0..w {
                                let gv = src[y * w + x];
                                dst[y.saturating_sub(1) * w + x] += gv;
                                dst[(y + 1).min(h - 1) * w + x] += gv;
                                dst[y * w + x.saturating_sub(1)] += gv;
                                dst[y * w + (x + 1).min(w - 1)] += gv;
                                dst[y * w + x] -= four * gv;
                            }
                        }
                    }
                }
            }
            Op::BroadcastTo { a, map } => {
                if let Some(da) = acc(adj, nodes, *a) {
                    map.iter().zip(g).for_each(|(&j, gv)| da[j] += *gv);
                }
            }
            Op::Sum { a } => {
                if let Some(da) = acc(adj, nodes, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(da) = acc(adj, nodes, *a) {
                    let s = g[0] / T::of(da.len().max(1) as f64);
                    da.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Bce { p, target, delta } => {
                let pv = val(*p);
                let n = T::of(pv.len().max(1) as f64);
                if let Some(dp) = acc(adj, nodes, *p) {
                    for i in 0..pv.len() {
                        let pi = pv[i];
                        if pi < *delta || pi > T::one() - *delta {
                            continue;
                        }
                        let t = target[i];
                        dp[i] += -g[0] / n * (t / pi - (T::one() - t) / (T::one() - pi));
                    }
                }
            }
            Op::Dice { p, target, eps } => {
                let shape = nodes[p.0].value.shape();
                let pv = val(*p);
                let (batch, per) = batch_split(shape, pv.len());
                let scale = g[0] / T::of(batch as f64);
                if let Some(dp) = acc(adj, nodes, *p) {
                    for s in 0..batch {
                        let r = s * per..(s + 1) * per;
                        let (inter, sp, sg) = dice_terms(&pv[r.clone()], &target[r.clone()]);
                        let num = T::of(2.0) * inter + *eps;
                        let den = sp + sg + *eps;
                        for i in r {
                            // d/dp_i of -(num / den)
                            dp[i] += -scale * (T::of(2.0) * target[i] * den - num) / (den * den);
                        }
                    }
                }
            }
        }
    }
}

fn batch_split(shape: &[usize], numel: usize) -> (usize, usize) {
    let batch = if shape.len() >= 2 { shape[0].max(1) } else { 1 };
    (batch, numel / batch)
}

/// `(sum p g, sum p, sum g)`, accumulated in f64.
fn dice_terms<T: Float>(p: &[T], g: &[T]) -> (T, T, T) {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(g) {
        let (a, b) = (a.as_f64(), b.as_f64());
        inter += a * b;
        sp += a;
        sg += b;
    }
    (T::of(inter), T::of(sp), T::of(sg))
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::Shape(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {sa:?} x {sb:?} ({k} vs {k2})"
        )));
    }
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let shared = sb.len() == 2;
    if !shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(Error::Shape(format!(
            "matmul leading dims differ: {sa:?} x {sb:?}"
        )));
    }
    Ok((m, k, p, batch, shared))
}

fn acc<'a, T: Float>(adj: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}
