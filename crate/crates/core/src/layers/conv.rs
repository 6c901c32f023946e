//! Quaternion 2-D convolution.
//!
//! Two modes share one interface:
//!
//! * [`ConvMode::Separable`] convolves each input component with the
//!   same-named kernel component, `c_q = W_q ⋆ x_q`, and mixes the four
//!   results with the fixed sign matrix `S = Mᵀ`:
//!
//!   ```text
//!   y_r = c_r - c_i - c_j - c_k
//!   y_i = c_r + c_i + c_j - c_k
//!   y_j = c_r - c_i + c_j + c_k
//!   y_k = c_r + c_i - c_j + c_k
//!   ```
//!
//! * [`ConvMode::FullHamilton`] evaluates the Hamilton product `w ⊗ x` at
//!   every tap, i.e. all sixteen cross-component convolutions.
//!
//! The fused kernels walk output planes once with 64-bit accumulators and
//! apply the mixing in the same pass. Output planes are independent, so the
//! result does not depend on the rayon thread count.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use super::{Module, Param, ParamKind};
use crate::error::{QuanError, Result};
use crate::quaternion::Quaternion;
use crate::scalar::Real;
use crate::tensor::{QTensor, Shape, Q};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConvMode {
    #[default]
    Separable,
    FullHamilton,
}

impl ConvMode {
    pub fn name(self) -> &'static str {
        match self {
            ConvMode::Separable => "separable",
            ConvMode::FullHamilton => "full_hamilton",
        }
    }

    /// Real component convolutions per (output, input) channel pair.
    pub fn component_convolutions(self) -> u64 {
        match self {
            ConvMode::Separable => 4,
            ConvMode::FullHamilton => 16,
        }
    }
}

impl fmt::Display for ConvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConvMode {
    type Err = QuanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(ConvMode::Separable),
            "full_hamilton" => Ok(ConvMode::FullHamilton),
            other => Err(QuanError::Config(format!(
                "invalid convolution mode '{other}' (expected separable or full_hamilton)"
            ))),
        }
    }
}

/// A 4×4 matrix of ±1 entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixMatrix(pub [[i8; 4]; 4]);

impl MixMatrix {
    /// The backward mixing matrix `M`.
    pub const M: MixMatrix = MixMatrix([
        [1, 1, 1, 1],
        [-1, 1, -1, 1],
        [-1, 1, 1, -1],
        [-1, -1, 1, 1],
    ]);

    /// The forward sign matrix `S = Mᵀ`; row `p` holds the signs of output component `p`.
    pub const S: MixMatrix = MixMatrix::M.transpose();

    pub const fn transpose(self) -> MixMatrix {
        let m = self.0;
        let mut t = [[0i8; 4]; 4];
        let mut r = 0;
        while r < 4 {
            let mut c = 0;
            while c < 4 {
                t[c][r] = m[r][c];
                c += 1;
            }
            r += 1;
        }
        MixMatrix(t)
    }

    pub fn as_f64(self) -> [[f64; 4]; 4] {
        self.0.map(|row| row.map(f64::from))
    }
}

const S_F64: [[f64; 4]; 4] = [
    [1.0, -1.0, -1.0, -1.0],
    [1.0, 1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0, 1.0],
];

#[inline(always)]
fn mix_forward(c: [f64; 4]) -> [f64; 4] {
    let s = &S_F64;
    std::array::from_fn(|p| s[p][0] * c[0] + s[p][1] * c[1] + s[p][2] * c[2] + s[p][3] * c[3])
}

/// `dc_q = Σ_p S[p][q]·dy_p`, the adjoint of [`mix_forward`].
#[inline(always)]
fn mix_adjoint(dy: [f64; 4]) -> [f64; 4] {
    let s = &S_F64;
    std::array::from_fn(|q| s[0][q] * dy[0] + s[1][q] * dy[1] + s[2][q] * dy[2] + s[3][q] * dy[3])
}

/// Layer hyperparameters of a quaternion convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: ConvMode,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            out_channels,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: 0,
            mode: ConvMode::Separable,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Zero padding of `k / 2`, which preserves spatial size at stride 1 for odd kernels.
    pub fn same(mut self) -> Self {
        self.padding = self.kernel_h / 2;
        self
    }

    pub fn mode(mut self, mode: ConvMode) -> Self {
        self.mode = mode;
        self
    }

    /// Kernel bank dimensions `(out, in, kh, kw, 4)`.
    pub fn weight_dims(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
            Q,
        ]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_dims().iter().product()
    }

    pub fn bias_len(&self) -> usize {
        self.out_channels * Q
    }

    /// Quaternion fan-in: input channels × kernel taps.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(QuanError::Config("stride must be at least 1".into()));
        }
        if self.out_channels == 0 || self.in_channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(QuanError::Shape(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.channels != self.in_channels {
            return Err(QuanError::Shape(format!(
                "convolution expects {} input channels, got {input}",
                self.in_channels
            )));
        }
        let ph = input.height + 2 * self.padding;
        let pw = input.width + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(QuanError::Shape(format!(
                "padded input {ph}x{pw} smaller than kernel {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok(Shape::new(
            input.batch,
            self.out_channels,
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Scalar multiplies of one forward pass counted over every kernel tap.
    pub fn multiplies(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok((out.batch * out.channels * out.height * out.width) as u64
            * self.fan_in() as u64
            * self.mode.component_convolutions())
    }
}

/// Borrowed view of a kernel bank, optional bias and hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct QConvParams<'a, T> {
    pub spec: ConvSpec,
    /// `(out, in, kh, kw, 4)` row-major.
    pub weights: &'a [T],
    /// `(out, 4)` row-major.
    pub bias: Option<&'a [T]>,
}

impl<'a, T: Real> QConvParams<'a, T> {
    pub fn new(spec: ConvSpec, weights: &'a [T], bias: Option<&'a [T]>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.weight_len() {
            return Err(QuanError::Shape(format!(
                "kernel bank has {} values, expected {:?}",
                weights.len(),
                spec.weight_dims()
            )));
        }
        if let Some(b) = bias {
            if b.len() != spec.bias_len() {
                return Err(QuanError::Shape(format!(
                    "bias has {} values, expected {}",
                    b.len(),
                    spec.bias_len()
                )));
            }
        }
        Ok(QConvParams {
            spec,
            weights,
            bias,
        })
    }

    #[inline(always)]
    fn tap(&self, o: usize, i: usize, u: usize, v: usize) -> [f64; 4] {
        let s = &self.spec;
        let base = (((o * s.in_channels + i) * s.kernel_h + u) * s.kernel_w + v) * Q;
        std::array::from_fn(|q| self.weights[base + q].to_f64())
    }
}

/// Output positions `o` in `[lo, hi)` whose input index `o·stride + k − pad` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let top = in_len + pad;
    let hi = if top <= k {
        0
    } else {
        ((top - 1 - k) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

#[inline(always)]
fn hamilton4(p: [f64; 4], q: [f64; 4]) -> [f64; 4] {
    Quaternion::from_array(p)
        .hamilton(Quaternion::from_array(q))
        .to_array()
}

#[inline(always)]
fn conj4(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

#[inline(always)]
fn load4<T: Real>(s: &[T], at: usize) -> [f64; 4] {
    [
        s[at].to_f64(),
        s[at + 1].to_f64(),
        s[at + 2].to_f64(),
        s[at + 3].to_f64(),
    ]
}

/// Output channels computed together, so each input row fetched from cache is
/// reused this many times.
const CHANNEL_GROUP: usize = 4;

#[inline(always)]
fn tap_update<const FULL: bool>(a: &mut [f64], w: [f64; 4], x: &[f64]) {
    if FULL {
        let prod = hamilton4(w, [x[0], x[1], x[2], x[3]]);
        for q in 0..Q {
            a[q] += prod[q];
        }
    } else {
        for q in 0..Q {
            a[q] += w[q] * x[q];
        }
    }
}

/// Full-Hamilton contribution of one input plane to output row `oy`, one tap
/// at a time over the whole row so the inner loop streams contiguous memory.
#[inline(always)]
fn accumulate_row(spec: &ConvSpec, xs: Shape, xin: &[f64], taps: &[[f64; 4]], oy: usize, wo: usize, acc: &mut [f64]) {
    let (kh, kw, pad, stride) = (spec.kernel_h, spec.kernel_w, spec.padding, spec.stride);
    let row_len = xs.width * Q;
    let by = oy * stride;
    let u0 = pad.saturating_sub(by);
    let u1 = kh.min((xs.height + pad).saturating_sub(by));
    for u in u0..u1 {
        let xrow = &xin[(by + u - pad) * row_len..][..row_len];
        for v in 0..kw {
            let w = taps[u * kw + v];
            let (lo, hi) = valid_range(wo, xs.width, stride, v, pad);
            if lo == hi {
                continue;
            }
            let a = &mut acc[lo * Q..hi * Q];
            let x = &xrow[(lo * stride + v - pad) * Q..];
            if stride == 1 {
                for (a4, x4) in a.chunks_exact_mut(Q).zip(x.chunks_exact(Q)) {
                    tap_update::<true>(a4, w, x4);
                }
            } else {
                for (a4, x4) in a.chunks_exact_mut(Q).zip(x.chunks_exact(Q).step_by(stride)) {
                    tap_update::<true>(a4, w, x4);
                }
            }
        }
    }
}

/// Separable contribution of input plane `xin` to output row `oy` of every
/// channel in a group. Each input quaternion is loaded once per tap and used
/// for all channels, with the sums held in registers.
/// `taps[t][k]` is tap `t` of group channel `k`; `acc` holds one row per
/// channel.
#[inline(always)]
fn accumulate_group_row(
    spec: &ConvSpec,
    xs: Shape,
    xin: &[f64],
    taps: &[[[f64; 4]; CHANNEL_GROUP]],
    oy: usize,
    wo: usize,
    acc: &mut [f64],
) {
    let (kh, kw, pad, stride) = (spec.kernel_h, spec.kernel_w, spec.padding, spec.stride);
    let row_len = xs.width * Q;
    let row = wo * Q;
    let group = acc.len() / row;
    let by = oy * stride;
    let u0 = pad.saturating_sub(by);
    let u1 = kh.min((xs.height + pad).saturating_sub(by));
    for ox in 0..wo {
        let bx = ox * stride;
        let v0 = pad.saturating_sub(bx);
        let v1 = kw.min((xs.width + pad).saturating_sub(bx));
        let mut s = [[0.0f64; 4]; CHANNEL_GROUP];
        for u in u0..u1 {
            let xrow = &xin[(by + u - pad) * row_len..][..row_len];
            for v in v0..v1 {
                let x = &xrow[(bx + v - pad) * Q..][..Q];
                let w = &taps[u * kw + v];
                for k in 0..CHANNEL_GROUP {
                    tap_update::<false>(&mut s[k], w[k], x);
                }
            }
        }
        for (k, sk) in s.iter().enumerate().take(group) {
            let a = &mut acc[k * row + ox * Q..][..Q];
            for q in 0..Q {
                a[q] += sk[q];
            }
        }
    }
}

/// Fused forward pass for either mode.
///
/// Work is split into groups of output channels and walked one output row at
/// a time, so the running sums for a row stay in L1. Each output value is
/// accumulated in a fixed order (input channel, kernel row, kernel column),
/// so the result does not depend on the grouping or the thread count.
pub fn qconv2d_forward<T: Real>(x: &QTensor<T>, p: &QConvParams<'_, T>) -> Result<QTensor<T>> {
    let spec = p.spec;
    let xs = x.shape();
    let out_shape = spec.output_shape(xs)?;
    let mut y = QTensor::<T>::zeros(out_shape);
    let (ho, wo) = (out_shape.height, out_shape.width);
    let plane = ho * wo * Q;
    let in_plane = xs.plane() * Q;
    let ntaps = spec.kernel_h * spec.kernel_w;
    // Each input value is read once per tap and output channel; widen it once.
    let xd: Vec<f64> = x.data().iter().map(|v| v.to_f64()).collect();

    y.data_mut()
        .par_chunks_mut(spec.out_channels * plane)
        .enumerate()
        .for_each(|(b, batch_out)| {
            batch_out
                .par_chunks_mut(CHANNEL_GROUP * plane)
                .enumerate()
                .for_each(|(g, out)| {
                    let o0 = g * CHANNEL_GROUP;
                    let group = out.len() / plane;
                    let separable = spec.mode == ConvMode::Separable;
                    // Separable: gtaps[i * ntaps + t][k], zero for channels past the group.
                    // Full: taps[(k * in_channels + i) * ntaps + t].
                    let mut gtaps = Vec::new();
                    let mut taps = Vec::new();
                    if separable {
                        gtaps = vec![[[0.0f64; 4]; CHANNEL_GROUP]; spec.in_channels * ntaps];
                        for i in 0..spec.in_channels {
                            for t in 0..ntaps {
                                for (k, w) in gtaps[i * ntaps + t].iter_mut().take(group).enumerate() {
                                    *w = p.tap(o0 + k, i, t / spec.kernel_w, t % spec.kernel_w);
                                }
                            }
                        }
                    } else {
                        taps.reserve(group * spec.in_channels * ntaps);
                        for k in 0..group {
                            for i in 0..spec.in_channels {
                                for t in 0..ntaps {
                                    taps.push(p.tap(o0 + k, i, t / spec.kernel_w, t % spec.kernel_w));
                                }
                            }
                        }
                    }
                    let bias: Vec<[f64; 4]> = (0..group)
                        .map(|k| p.bias.map_or([0.0; 4], |bv| load4(bv, (o0 + k) * Q)))
                        .collect();
                    let row = wo * Q;
                    let mut acc = vec![0.0f64; group * row];
                    for oy in 0..ho {
                        acc.fill(0.0);
                        for i in 0..spec.in_channels {
                            let xin = &xd[(b * xs.channels + i) * in_plane..][..in_plane];
                            if separable {
                                let t = &gtaps[i * ntaps..][..ntaps];
                                accumulate_group_row(&spec, xs, xin, t, oy, wo, &mut acc);
                                continue;
                            }
                            for (k, a) in acc.chunks_exact_mut(row).enumerate() {
                                let t = &taps[(k * spec.in_channels + i) * ntaps..][..ntaps];
                                accumulate_row(&spec, xs, xin, t, oy, wo, a);
                            }
                        }
                        for (k, a) in acc.chunks_exact(row).enumerate() {
                            let dst_row = &mut out[k * plane + oy * row..][..row];
                            for (dst, src) in dst_row.chunks_exact_mut(Q).zip(a.chunks_exact(Q)) {
                                let c = [src[0], src[1], src[2], src[3]];
                                let mixed = match spec.mode {
                                    ConvMode::Separable => mix_forward(c),
                                    ConvMode::FullHamilton => c,
                                };
                                for q in 0..Q {
                                    dst[q] = T::from_f64(mixed[q] + bias[k][q]);
                                }
                            }
                        }
                    }
                });
        });
    Ok(y)
}

/// Gradients of a convolution with respect to its input, kernel bank and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: QTensor<T>,
    pub dweights: Vec<f64>,
    pub dbias: Option<Vec<f64>>,
}

/// Exact adjoint of [`qconv2d_forward`] for the active mode.
pub fn qconv2d_backward<T: Real>(
    x: &QTensor<T>,
    p: &QConvParams<'_, T>,
    dy: &QTensor<T>,
) -> Result<ConvGrads<T>> {
    let spec = p.spec;
    let xs = x.shape();
    let ys = spec.output_shape(xs)?;
    if dy.shape() != ys {
        return Err(QuanError::Shape(format!(
            "output gradient {} does not match forward output {ys}",
            dy.shape()
        )));
    }
    let (ho, wo) = (ys.height, ys.width);
    let out_plane = ho * wo * Q;
    let in_plane = xs.plane() * Q;

    // Gradient with respect to the pre-mixing accumulators.
    let dc: Vec<f64> = dy
        .data()
        .chunks_exact(Q)
        .flat_map(|g| {
            let g = load4(g, 0);
            match spec.mode {
                ConvMode::Separable => mix_adjoint(g),
                ConvMode::FullHamilton => g,
            }
        })
        .collect();

    let mut dx = QTensor::<T>::zeros(xs);
    dx.data_mut()
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(bi, dst)| {
            let (b, i) = (bi / xs.channels, bi % xs.channels);
            let mut acc = vec![0.0f64; in_plane];
            for o in 0..spec.out_channels {
                let g = &dc[(b * spec.out_channels + o) * out_plane..][..out_plane];
                for u in 0..spec.kernel_h {
                    let (oy0, oy1) = valid_range(ho, xs.height, spec.stride, u, spec.padding);
                    for v in 0..spec.kernel_w {
                        let (ox0, ox1) = valid_range(wo, xs.width, spec.stride, v, spec.padding);
                        let w = p.tap(o, i, u, v);
                        let wc = conj4(w);
                        for oy in oy0..oy1 {
                            let iy = oy * spec.stride + u - spec.padding;
                            let arow = &mut acc[iy * xs.width * Q..][..xs.width * Q];
                            let grow = &g[oy * wo * Q..][..wo * Q];
                            for ox in ox0..ox1 {
                                let ix = (ox * spec.stride + v - spec.padding) * Q;
                                let gq = [grow[ox * Q], grow[ox * Q + 1], grow[ox * Q + 2], grow[ox * Q + 3]];
                                let a = &mut arow[ix..ix + Q];
                                match spec.mode {
                                    ConvMode::Separable => {
                                        for q in 0..Q {
                                            a[q] += w[q] * gq[q];
                                        }
                                    }
                                    ConvMode::FullHamilton => {
                                        let prod = hamilton4(wc, gq);
                                        for q in 0..Q {
                                            a[q] += prod[q];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = T::from_f64(*a);
            }
        });

    let taps = spec.kernel_h * spec.kernel_w * Q;
    let xd = x.data();
    let mut dweights = vec![0.0f64; spec.weight_len()];
    dweights
        .par_chunks_mut(taps)
        .enumerate()
        .for_each(|(oi, dw)| {
            let (o, i) = (oi / spec.in_channels, oi % spec.in_channels);
            for b in 0..xs.batch {
                let xin = &xd[(b * xs.channels + i) * in_plane..][..in_plane];
                let g = &dc[(b * spec.out_channels + o) * out_plane..][..out_plane];
                for u in 0..spec.kernel_h {
                    let (oy0, oy1) = valid_range(ho, xs.height, spec.stride, u, spec.padding);
                    for v in 0..spec.kernel_w {
                        let (ox0, ox1) = valid_range(wo, xs.width, spec.stride, v, spec.padding);
                        let mut acc = [0.0f64; 4];
                        for oy in oy0..oy1 {
                            let iy = oy * spec.stride + u - spec.padding;
                            let xrow = &xin[iy * xs.width * Q..][..xs.width * Q];
                            let grow = &g[oy * wo * Q..][..wo * Q];
                            for ox in ox0..ox1 {
                                let ix = (ox * spec.stride + v - spec.padding) * Q;
                                let gq = [grow[ox * Q], grow[ox * Q + 1], grow[ox * Q + 2], grow[ox * Q + 3]];
                                match spec.mode {
                                    ConvMode::Separable => {
                                        for q in 0..Q {
                                            acc[q] += gq[q] * xrow[ix + q].to_f64();
                                        }
                                    }
                                    ConvMode::FullHamilton => {
                                        let prod = hamilton4(gq, conj4(load4(xrow, ix)));
                                        for q in 0..Q {
                                            acc[q] += prod[q];
                                        }
                                    }
                                }
                            }
                        }
                        let d = &mut dw[(u * spec.kernel_w + v) * Q..][..Q];
                        for q in 0..Q {
                            d[q] += acc[q];
                        }
                    }
                }
            }
        });

    let dbias = p.bias.map(|_| {
        let mut db = vec![0.0f64; spec.bias_len()];
        for (n, g) in dy.data().chunks_exact(out_plane).enumerate() {
            let o = n % spec.out_channels;
            for px in g.chunks_exact(Q) {
                for q in 0..Q {
                    db[o * Q + q] += px[q].to_f64();
                }
            }
        }
        db
    });

    Ok(ConvGrads {
        dx,
        dweights,
        dbias,
    })
}

/// Counts work done by [`qconv2d_forward_unfused`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Real convolutions of one input component with one kernel component.
    pub component_convolutions: u64,
    /// Scalar multiplies over every kernel tap, padding included.
    pub multiplies: u64,
}

/// Real convolution of input component `xq` with kernel component `wq` into `dst`.
fn component_convolution<T: Real>(
    x: &QTensor<T>,
    p: &QConvParams<'_, T>,
    xq: usize,
    wq: usize,
    sign: f64,
    dst: &mut [f64],
    counter: &mut OpCounter,
) {
    let spec = p.spec;
    let xs = x.shape();
    let (ho, wo) = {
        let o = spec.output_shape(xs).expect("validated by caller");
        (o.height, o.width)
    };
    counter.component_convolutions += 1;
    counter.multiplies += (xs.batch * spec.out_channels * ho * wo * spec.fan_in()) as u64;
    for b in 0..xs.batch {
        for o in 0..spec.out_channels {
            let out = &mut dst[(b * spec.out_channels + o) * ho * wo..][..ho * wo];
            for i in 0..spec.in_channels {
                for u in 0..spec.kernel_h {
                    let (oy0, oy1) = valid_range(ho, xs.height, spec.stride, u, spec.padding);
                    for v in 0..spec.kernel_w {
                        let (ox0, ox1) = valid_range(wo, xs.width, spec.stride, v, spec.padding);
                        let w = sign * p.tap(o, i, u, v)[wq];
                        for oy in oy0..oy1 {
                            let iy = oy * spec.stride + u - spec.padding;
                            for ox in ox0..ox1 {
                                let ix = ox * spec.stride + v - spec.padding;
                                out[oy * wo + ox] += w * x.data()[x.offset(b, i, iy, ix) + xq].to_f64();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Multi-pass forward: one full real convolution per component pair, then mixing.
///
/// Separable mode runs four component convolutions into separate buffers;
/// full-Hamilton mode runs sixteen. Used as the unfused baseline and as an
/// operation counter.
pub fn qconv2d_forward_unfused<T: Real>(
    x: &QTensor<T>,
    p: &QConvParams<'_, T>,
    counter: &mut OpCounter,
) -> Result<QTensor<T>> {
    let spec = p.spec;
    let out_shape = spec.output_shape(x.shape())?;
    let n = out_shape.numel() / Q;
    let mut parts = vec![vec![0.0f64; n]; Q];
    match spec.mode {
        ConvMode::Separable => {
            let mut c = vec![vec![0.0f64; n]; Q];
            for (q, buf) in c.iter_mut().enumerate() {
                component_convolution(x, p, q, q, 1.0, buf, counter);
            }
            for (pq, part) in parts.iter_mut().enumerate() {
                for (q, cq) in c.iter().enumerate() {
                    let s = S_F64[pq][q];
                    for (d, v) in part.iter_mut().zip(cq) {
                        *d += s * v;
                    }
                }
            }
        }
        ConvMode::FullHamilton => {
            // Row p of the left-multiplication matrix of w: (kernel component, input component, sign).
            const TERMS: [[(usize, usize, f64); 4]; 4] = [
                [(0, 0, 1.0), (1, 1, -1.0), (2, 2, -1.0), (3, 3, -1.0)],
                [(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 2, -1.0)],
                [(0, 2, 1.0), (1, 3, -1.0), (2, 0, 1.0), (3, 1, 1.0)],
                [(0, 3, 1.0), (1, 2, 1.0), (2, 1, -1.0), (3, 0, 1.0)],
            ];
            for (pq, part) in parts.iter_mut().enumerate() {
                for &(wq, xq, sign) in &TERMS[pq] {
                    component_convolution(x, p, xq, wq, sign, part, counter);
                }
            }
        }
    }
    let plane = out_shape.plane();
    let mut y = QTensor::<T>::zeros(out_shape);
    for (n_idx, dst) in y.data_mut().chunks_exact_mut(Q).enumerate() {
        let o = (n_idx / plane) % spec.out_channels;
        for q in 0..Q {
            let b = p.bias.map_or(0.0, |bv| bv[o * Q + q].to_f64());
            dst[q] = T::from_f64(parts[q][n_idx] + b);
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Fan-in scaled magnitude times a uniformly random unit quaternion, per tap.
    #[default]
    QuaternionUniform,
    /// Independent zero-mean normal components with variance `2 / (4·fan_in)`.
    ComponentHe,
}

/// Draws a kernel bank of `dims = (out, in, kh, kw, 4)`.
pub fn init_weights<T: Real, R: Rng + ?Sized>(
    dims: [usize; 5],
    scheme: InitScheme,
    rng: &mut R,
) -> Vec<T> {
    let fan_in = (dims[1] * dims[2] * dims[3]).max(1) as f64;
    let taps = dims[0] * dims[1] * dims[2] * dims[3];
    let mut out = Vec::with_capacity(taps * Q);
    match scheme {
        InitScheme::QuaternionUniform => {
            // Magnitude ~ sigma·chi(4), so each component has variance sigma².
            let sigma = (1.0 / (2.0 * fan_in)).sqrt();
            for _ in 0..taps {
                let mag = sigma
                    * (0..4)
                        .map(|_| {
                            let g: f64 = StandardNormal.sample(rng);
                            g * g
                        })
                        .sum::<f64>()
                        .sqrt();
                let dir = loop {
                    let d: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
                    let n = Quaternion::from_array(d).norm();
                    if n > 1e-12 {
                        break d.map(|c| c / n);
                    }
                };
                out.extend(dir.map(|c| T::from_f64(mag * c)));
            }
        }
        InitScheme::ComponentHe => {
            let normal = Normal::new(0.0, (2.0 / (fan_in * 4.0)).sqrt()).expect("finite std");
            out.extend((0..taps * Q).map(|_| T::from_f64(normal.sample(rng))));
        }
    }
    out
}

/// Convolution layer owning its kernel bank and optional bias.
pub struct QConv<T> {
    spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<QTensor<T>>,
}

impl<T: Real> QConv<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        spec: ConvSpec,
        with_bias: bool,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let weights = init_weights(spec.weight_dims(), scheme, rng);
        Ok(Self::from_parts(name, spec, weights, with_bias.then(|| vec![T::ZERO; spec.bias_len()])))
    }

    pub fn from_parts(name: &str, spec: ConvSpec, weights: Vec<T>, bias: Option<Vec<T>>) -> Self {
        QConv {
            spec,
            weight: Param::new(
                format!("{name}.weight"),
                spec.weight_dims().to_vec(),
                ParamKind::QuatKernel,
                weights,
            ),
            bias: bias.map(|b| Param::new(format!("{name}.bias"), vec![spec.out_channels, Q], ParamKind::Bias, b)),
            input: None,
        }
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn params_view(&self) -> QConvParams<'_, T> {
        QConvParams {
            spec: self.spec,
            weights: &self.weight.value,
            bias: self.bias.as_ref().map(|b| b.value.as_slice()),
        }
    }
}

impl<T: Real> Module<T> for QConv<T> {
    fn forward(&mut self, x: &QTensor<T>, _train: bool) -> Result<QTensor<T>> {
        let y = qconv2d_forward(x, &self.params_view())?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>> {
        let x = self.input.as_ref().ok_or(QuanError::NoForward("QConv"))?;
        let grads = qconv2d_backward(x, &self.params_view(), dy)?;
        self.weight.accumulate(&grads.dweights);
        if let (Some(b), Some(db)) = (self.bias.as_mut(), grads.dbias.as_ref()) {
            b.accumulate(db);
        }
        Ok(grads.dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.spec.output_shape(input)
    }
}
