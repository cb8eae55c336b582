//! Bottleneck transformer: tokenization, fixed 2-D sinusoidal positions and
//! pre-norm multi-head self-attention layers.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

use super::layers::{scoped, Ctx, LayerNorm, Linear};

/// Fixed 2-D sinusoidal encoding of shape `[h*w, dim]`.
///
/// The first half of each embedding encodes the row, the second half the
/// column; each half alternates `sin`/`cos` over geometric frequencies.
pub fn positional_encoding_2d<T: Float>(h: usize, w: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 4 != 0 {
        return Err(Error::config("transformer.dim", "must be divisible by 4 for 2-D positions"));
    }
    let half = dim / 2;
    let mut data = vec![T::zero(); h * w * dim];
    for r in 0..h {
        for c in 0..w {
            let row = &mut data[(r * w + c) * dim..][..dim];
            for (offset, pos) in [(0, r), (half, c)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    let angle = pos as f64 * freq;
                    row[offset + 2 * i] = T::of(angle.sin());
                    row[offset + 2 * i + 1] = T::of(angle.cos());
                }
            }
        }
    }
    Tensor::new(vec![h * w, dim], data)
}

/// `[N, C, h, w] -> [N, h*w, C]`; token `t` is pixel `(t / w, t % w)`.
pub fn tokenize<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let [n, c, h, w] = g.value(x).dims4()?;
    let flat = g.reshape(x, &[n, c, h * w])?;
    g.permute(flat, &[0, 2, 1])
}

/// Inverse of [`tokenize`].
pub fn detokenize<T: Float>(g: &mut Graph<T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::Shape(format!(
            "detokenize: tokens {s:?} cannot fill a {h}x{w} map ({} tokens required)",
            h * w
        )));
    }
    let chw = g.permute(tokens, &[0, 2, 1])?;
    g.reshape(chw, &[s[0], s[2], h, w])
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl TransformerLayer {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(
                "transformer.heads",
                format!("dim {dim} is not divisible by heads {heads}"),
            ));
        }
        let hidden = ffn_mult * dim;
        Ok(Self {
            dim,
            heads,
            norm1: LayerNorm::new(store, &scoped(name, "norm1"), dim),
            q: Linear::new(store, &scoped(name, "attn.q"), dim, dim, true, rng),
            k: Linear::new(store, &scoped(name, "attn.k"), dim, dim, true, rng),
            v: Linear::new(store, &scoped(name, "attn.v"), dim, dim, true, rng),
            o: Linear::new(store, &scoped(name, "attn.o"), dim, dim, true, rng),
            norm2: LayerNorm::new(store, &scoped(name, "norm2"), dim),
            ffn1: Linear::new(store, &scoped(name, "ffn.0"), dim, hidden, true, rng),
            ffn2: Linear::new(store, &scoped(name, "ffn.1"), hidden, dim, true, rng),
        })
    }

    /// Multi-head attention on already-normalized tokens `[N, T, d]`.
    /// Returns the output and the attention weights `[N, heads, T, T]`.
    pub fn attention<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (n, t) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let split = |g: &mut Graph<T>, v: Var, perm: &[usize]| -> Result<Var> {
            let r = g.reshape(v, &[n, t, self.heads, dh])?;
            g.permute(r, perm)
        };
        let q = self.q.forward(g, cx, x)?;
        let k = self.k.forward(g, cx, x)?;
        let v = self.v.forward(g, cx, x)?;
        let q = split(g, q, &[0, 2, 1, 3])?;
        let kt = split(g, k, &[0, 2, 3, 1])?;
        let v = split(g, v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax(scores, 3)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, t, self.dim])?;
        Ok((self.o.forward(g, cx, ctx)?, attn))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, cx, x)?.0)
    }

    pub fn forward_with_attention<T: Float>(
        &self,
        g: &mut Graph<T>,
        cx: &Ctx<T>,
        x: Var,
    ) -> Result<(Var, Var)> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::Shape(format!(
                "transformer layer expects [N, T, {}], got {s:?}",
                self.dim
            )));
        }
        let h = self.norm1.forward(g, cx, x)?;
        let (a, attn) = self.attention(g, cx, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, cx, x)?;
        let h = self.ffn1.forward(g, cx, h)?;
        let h = g.silu(h);
        let h = self.ffn2.forward(g, cx, h)?;
        Ok((g.add(x, h)?, attn))
    }

    pub fn param_count(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.o, &self.ffn1, &self.ffn2]
            .iter()
            .map(|l| l.param_count())
            .sum::<usize>()
            + self.norm1.param_count()
            + self.norm2.param_count()
    }
}

/// Token projection, positional encoding and `L` transformer layers, mapping
/// a bottleneck map `[N, C, h, w]` to a global map `[N, d, h, w]`.
#[derive(Clone, Debug)]
pub struct GlobalEncoder {
    pub proj: Linear,
    pub layers: Vec<TransformerLayer>,
}

impl GlobalEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim % 4 != 0 {
            return Err(Error::config("transformer.dim", "must be divisible by 4"));
        }
        let proj = Linear::new(store, &scoped(name, "proj"), in_channels, dim, true, rng);
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(store, &scoped(name, &format!("layers.{i}")), dim, heads, ffn_mult, rng))
            .collect::<Result<_>>()?;
        Ok(Self { proj, layers })
    }

    pub fn dim(&self) -> usize {
        self.proj.out_features
    }

    /// Projected tokens with positions added, before any layer.
    pub fn embed<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(x).dims4()?;
        let tokens = tokenize(g, x)?;
        let tokens = self.proj.forward(g, cx, tokens)?;
        let pe = g.constant(positional_encoding_2d(h, w, self.dim())?);
        g.add(tokens, pe)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, cx: &Ctx<T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(x).dims4()?;
        let mut tokens = self.embed(g, cx, x)?;
        for layer in &self.layers {
            tokens = layer.forward(g, cx, tokens)?;
        }
        detokenize(g, tokens, h, w)
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count() + self.layers.iter().map(|l| l.param_count()).sum::<usize>()
    }
}
