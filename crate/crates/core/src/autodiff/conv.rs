//! 2-D convolution kernels (NCHW).
//!
//! Three forward paths share one [`Conv2dSpec`]:
//! - depthwise (`groups == C_in == C_out`): direct per-channel summation;
//! - everything else: per-sample, per-group im2col followed by GEMM;
//! - [`conv2d_reference`]: plain direct summation, used to verify the two above.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    /// Stride 1, dilation 1, one group, "same" padding, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: kernel.saturating_sub(1) / 2,
            bias: false,
        }
    }

    /// Depthwise 3x3-style conv: one filter per channel.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self::new(channels, channels, kernel).groups(channels)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Sets the dilation and re-derives "same" padding `dilation * (K - 1) / 2`.
    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * self.kernel.saturating_sub(1) / 2;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel,
            self.kernel,
        ]
    }

    /// Trainable weight scalars, bias included.
    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if self.dilation == 0 {
            return Err(Error::InvalidArgument("conv2d dilation must be positive".into()));
        }
        if self.kernel == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument(
                "conv2d kernel and groups must be positive".into(),
            ));
        }
        if self.in_channels % self.groups != 0 {
            return Err(Error::Shape(format!(
                "conv2d in_channels {} not divisible by groups {}",
                self.in_channels, self.groups
            )));
        }
        if self.out_channels % self.groups != 0 {
            return Err(Error::Shape(format!(
                "conv2d out_channels {} not divisible by groups {}",
                self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < span || wp < span {
            return Err(Error::Shape(format!(
                "conv2d input {h}x{w} (padded {hp}x{wp}) smaller than dilated kernel extent {span}"
            )));
        }
        Ok(((hp - span) / self.stride + 1, (wp - span) / self.stride + 1))
    }

    /// Checks input / weight / bias shapes against the spec.
    pub fn check<T: Float>(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<(usize, usize)> {
        self.validate()?;
        let [_, c, h, w] = input.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv2d input channel dim (dim 1) is {c}, expected in_channels {}",
                self.in_channels
            )));
        }
        let expect = self.weight_shape();
        let got = weight.shape();
        if got.len() != 4 {
            return Err(Error::Shape(format!("conv2d weight must be 4-D, got {got:?}")));
        }
        for (dim, (g, e)) in got.iter().zip(expect.iter()).enumerate() {
            if g != e {
                return Err(Error::Shape(format!(
                    "conv2d weight dim {dim} is {g}, expected {e} (weight shape {got:?} vs {expect:?})"
                )));
            }
        }
        match (bias, self.bias) {
            (Some(b), true) if b.shape() != [self.out_channels] => {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    b.shape(),
                    self.out_channels
                )))
            }
            (None, true) => return Err(Error::Shape("conv2d spec requires a bias".into())),
            (Some(_), false) => return Err(Error::Shape("conv2d spec has no bias".into())),
            _ => {}
        }
        self.output_hw(h, w)
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
}

impl Geometry {
    fn new(spec: &Conv2dSpec, input_shape: &[usize], ho: usize, wo: usize) -> Self {
        Self {
            n: input_shape[0],
            h: input_shape[2],
            w: input_shape[3],
            ho,
            wo,
            cin_g: spec.in_channels / spec.groups,
            cout_g: spec.out_channels / spec.groups,
            k: spec.kernel,
        }
    }

    fn ckk(&self) -> usize {
        self.cin_g * self.k * self.k
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    /// `1x1`, stride 1, no padding: the input plane is already the column matrix.
    fn pointwise(&self, spec: &Conv2dSpec) -> bool {
        self.k == 1 && spec.stride == 1 && spec.padding == 0
    }
}

/// Input coordinate for output coordinate `o` and tap `t`, if inside the image.
#[inline]
fn tap(o: usize, t: usize, spec: &Conv2dSpec, extent: usize) -> Option<usize> {
    let pos = (o * spec.stride + t * spec.dilation) as isize - spec.padding as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

fn im2col<T: Float>(x: &[T], spec: &Conv2dSpec, g: &Geometry, col: &mut [T]) {
    let p = g.plane_out();
    for c in 0..g.cin_g {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    match tap(oy, ky, spec, g.h) {
                        None => dst.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match tap(ox, kx, spec, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], spec: &Conv2dSpec, g: &Geometry, dx: &mut [T]) {
    let p = g.plane_out();
    for c in 0..g.cin_g {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let Some(iy) = tap(oy, ky, spec, g.h) else { continue };
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, v) in src.iter().enumerate() {
                        if let Some(ix) = tap(ox, kx, spec, g.w) {
                            plane[iy * g.w + ix] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Shapes must already be validated with [`Conv2dSpec::check`].
pub fn conv2d_forward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    let (ho, wo) = spec.check(input, weight, bias)?;
    let g = Geometry::new(spec, input.shape(), ho, wo);
    let p = g.plane_out();
    let mut out = vec![T::zero(); g.n * spec.out_channels * p];
    let x = input.data();
    let wt = weight.data();

    if spec.is_depthwise() {
        depthwise_forward(x, wt, spec, &g, &mut out);
    } else {
        let ckk = g.ckk();
        let mut col = if g.pointwise(spec) { Vec::new() } else { vec![T::zero(); ckk * p] };
        for n in 0..g.n {
            for grp in 0..spec.groups {
                let xs = &x[(n * spec.in_channels + grp * g.cin_g) * g.h * g.w..][..g.cin_g * g.h * g.w];
                let cols: &[T] = if g.pointwise(spec) {
                    xs
                } else {
                    im2col(xs, spec, &g, &mut col);
                    &col
                };
                let ws = &wt[grp * g.cout_g * ckk..][..g.cout_g * ckk];
                let os = &mut out[(n * spec.out_channels + grp * g.cout_g) * p..][..g.cout_g * p];
                T::gemm(
                    g.cout_g,
                    ckk,
                    p,
                    T::one(),
                    (ws, ckk as isize, 1),
                    (cols, p as isize, 1),
                    T::zero(),
                    (os, p as isize, 1),
                );
            }
        }
    }

    if let Some(b) = bias {
        for n in 0..g.n {
            for (co, bv) in b.data().iter().enumerate() {
                out[(n * spec.out_channels + co) * p..][..p]
                    .iter_mut()
                    .for_each(|v| *v += *bv);
            }
        }
    }
    Tensor::new(vec![g.n, spec.out_channels, ho, wo], out)
}

fn depthwise_forward<T: Float>(x: &[T], wt: &[T], spec: &Conv2dSpec, g: &Geometry, out: &mut [T]) {
    let c_total = spec.in_channels;
    let kk = g.k * g.k;
    for n in 0..g.n {
        for c in 0..c_total {
            let plane = &x[(n * c_total + c) * g.h * g.w..][..g.h * g.w];
            let wc = &wt[c * kk..(c + 1) * kk];
            let o = &mut out[(n * c_total + c) * g.plane_out()..][..g.plane_out()];
            for oy in 0..g.ho {
                for ky in 0..g.k {
                    let Some(iy) = tap(oy, ky, spec, g.h) else { continue };
                    let row = &plane[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut o[oy * g.wo..(oy + 1) * g.wo];
                    for kx in 0..g.k {
                        let wv = wc[ky * g.k + kx];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            if let Some(ix) = tap(ox, kx, spec, g.w) {
                                *ov += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution. Each output is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &Conv2dSpec,
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (ho, wo) = spec
        .output_hw(input.shape()[2], input.shape()[3])
        .expect("validated in forward");
    let g = Geometry::new(spec, input.shape(), ho, wo);
    let p = g.plane_out();
    let x = input.data();
    let wt = weight.data();
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); wt.len()]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); spec.out_channels];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                *d += grad_out[(n * spec.out_channels + co) * p..][..p].iter().copied().sum::<T>();
            }
        }
        db
    });

    if spec.is_depthwise() {
        depthwise_backward(x, wt, spec, &g, grad_out, dx.as_deref_mut(), dw.as_deref_mut());
    } else {
        let ckk = g.ckk();
        let pointwise = g.pointwise(spec);
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); ckk * p] };
        let mut dcol = if pointwise || dx.is_none() { Vec::new() } else { vec![T::zero(); ckk * p] };
        for n in 0..g.n {
            for grp in 0..spec.groups {
                let xoff = (n * spec.in_channels + grp * g.cin_g) * g.h * g.w;
                let xs = &x[xoff..][..g.cin_g * g.h * g.w];
                let dys = &grad_out[(n * spec.out_channels + grp * g.cout_g) * p..][..g.cout_g * p];
                let ws = &wt[grp * g.cout_g * ckk..][..g.cout_g * ckk];
                if let Some(dw) = dw.as_mut() {
                    let cols: &[T] = if pointwise {
                        xs
                    } else {
                        im2col(xs, spec, &g, &mut col);
                        &col
                    };
                    let dws = &mut dw[grp * g.cout_g * ckk..][..g.cout_g * ckk];
                    // dW += dY * col^T
                    T::gemm(
                        g.cout_g,
                        p,
                        ckk,
                        T::one(),
                        (dys, p as isize, 1),
                        (cols, 1, p as isize),
                        T::one(),
                        (dws, ckk as isize, 1),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx[xoff..][..g.cin_g * g.h * g.w];
                    // dcol = W^T * dY
                    if pointwise {
                        T::gemm(
                            ckk,
                            g.cout_g,
                            p,
                            T::one(),
                            (ws, 1, ckk as isize),
                            (dys, p as isize, 1),
                            T::one(),
                            (dxs, p as isize, 1),
                        );
                    } else {
                        T::gemm(
                            ckk,
                            g.cout_g,
                            p,
                            T::one(),
                            (ws, 1, ckk as isize),
                            (dys, p as isize, 1),
                            T::zero(),
                            (&mut dcol, p as isize, 1),
                        );
                        col2im(&dcol, spec, &g, dxs);
                    }
                }
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

fn depthwise_backward<T: Float>(
    x: &[T],
    wt: &[T],
    spec: &Conv2dSpec,
    g: &Geometry,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let c_total = spec.in_channels;
    let kk = g.k * g.k;
    let hw = g.h * g.w;
    for n in 0..g.n {
        for c in 0..c_total {
            let plane = &x[(n * c_total + c) * hw..][..hw];
            let dyp = &dy[(n * c_total + c) * g.plane_out()..][..g.plane_out()];
            for oy in 0..g.ho {
                for ky in 0..g.k {
                    let Some(iy) = tap(oy, ky, spec, g.h) else { continue };
                    let dyrow = &dyp[oy * g.wo..(oy + 1) * g.wo];
                    for kx in 0..g.k {
                        let widx = c * kk + ky * g.k + kx;
                        let mut acc = T::zero();
                        for (ox, d) in dyrow.iter().enumerate() {
                            if let Some(ix) = tap(ox, kx, spec, g.w) {
                                acc += *d * plane[iy * g.w + ix];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[(n * c_total + c) * hw + iy * g.w + ix] += wt[widx] * *d;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Direct-summation convolution, accumulated in `f64`.
///
/// Slow and simple; the fast paths are tested against it.
pub fn conv2d_reference<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    let (ho, wo) = spec.check(input, weight, bias)?;
    let [n, cin, h, w] = input.dims4()?;
    let cin_g = cin / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let k = spec.kernel;
    let mut out = Tensor::zeros(vec![n, spec.out_channels, ho, wo]);
    let od = out.data_mut();
    for b in 0..n {
        for co in 0..spec.out_channels {
            let grp = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bt| bt.data()[co].as_f64());
                    for ci in 0..cin_g {
                        let c = grp * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = input.data()
                                    [((b * cin + c) * h + iy as usize) * w + ix as usize];
                                let wv = weight.data()[((co * cin_g + ci) * k + ky) * k + kx];
                                acc += xv.as_f64() * wv.as_f64();
                            }
                        }
                    }
                    od[((b * spec.out_channels + co) * ho + oy) * wo + ox] = T::of(acc);
                }
            }
        }
    }
    Ok(out)
}
