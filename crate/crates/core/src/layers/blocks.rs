//! Cross-stage, pyramid-pooling and attention blocks built from quaternion layers.

use rand::Rng;

use super::activation::{Activation, ActivationKind};
use super::conv::{ConvMode, ConvSpec, InitScheme, QConv};
use super::norm::Iqbn;
use super::pool::{qmaxpool_backward, PoolSpec};
use super::{qmaxpool, Module, Param, Sequential};
use crate::error::{QuanError, Result};
use crate::scalar::Real;
use crate::tensor::{concat_channels, split_channels, QTensor, Shape, Q};

/// Choices shared by every layer inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockConfig {
    pub mode: ConvMode,
    pub activation: ActivationKind,
    pub init: InitScheme,
}

/// Convolution (no bias) → IQBN → activation.
pub fn conv_norm_act<T: Real, R: Rng + ?Sized>(
    name: &str,
    spec: ConvSpec,
    cfg: BlockConfig,
    rng: &mut R,
) -> Result<Sequential<T>> {
    let spec = spec.mode(cfg.mode);
    Ok(Sequential::new()
        .with(QConv::new(&format!("{name}.conv"), spec, false, cfg.init, rng)?)
        .with(Iqbn::new(&format!("{name}.bn"), spec.out_channels))
        .with(Activation::new(&format!("{name}.act"), cfg.activation)))
}

fn require_even(channels: usize, block: &str) -> Result<()> {
    if channels < 2 || channels % 2 != 0 {
        return Err(QuanError::Shape(format!(
            "{block} splits its input in half and needs an even channel count, got {channels}"
        )));
    }
    Ok(())
}

/// Two 3×3 conv-norm-activation stages with an identity shortcut.
pub struct QBottleneck<T> {
    body: Sequential<T>,
    shortcut: bool,
}

impl<T: Real> QBottleneck<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut body = Sequential::new();
        body.push(conv_norm_act(&format!("{name}.cv1"), ConvSpec::new(in_channels, out_channels, 3).same(), cfg, rng)?);
        body.push(conv_norm_act(&format!("{name}.cv2"), ConvSpec::new(out_channels, out_channels, 3).same(), cfg, rng)?);
        Ok(QBottleneck {
            body,
            shortcut: in_channels == out_channels,
        })
    }
}

impl<T: Real> Module<T> for QBottleneck<T> {
    fn forward(&mut self, x: &QTensor<T>, train: bool) -> Result<QTensor<T>> {
        let mut y = self.body.forward(x, train)?;
        if self.shortcut {
            for (a, b) in y.data_mut().iter_mut().zip(x.data()) {
                *a = T::from_f64(a.to_f64() + b.to_f64());
            }
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>> {
        let mut dx = self.body.backward(dy)?;
        if self.shortcut {
            for (a, b) in dx.data_mut().iter_mut().zip(dy.data()) {
                *a = T::from_f64(a.to_f64() + b.to_f64());
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.body.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.body.params_mut()
    }

    fn buffers(&self) -> Vec<(String, &[f64])> {
        self.body.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.body.buffers_mut()
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.body.output_shape(input)
    }
}

/// `QConv(Concat(QBottleneck(x₁), x₂))` with `x₁, x₂` the two channel halves.
pub struct QC3k2<T> {
    half: usize,
    bottleneck: QBottleneck<T>,
    fuse: QConv<T>,
}

impl<T: Real> QC3k2<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        require_even(in_channels, "QC3k2")?;
        let half = in_channels / 2;
        Ok(QC3k2 {
            half,
            bottleneck: QBottleneck::new(&format!("{name}.m"), half, half, cfg, rng)?,
            fuse: QConv::new(
                &format!("{name}.cv"),
                ConvSpec::new(in_channels, out_channels, 1).mode(cfg.mode),
                true,
                cfg.init,
                rng,
            )?,
        })
    }

    pub fn fuse_conv_mut(&mut self) -> &mut QConv<T> {
        &mut self.fuse
    }
}

impl<T: Real> Module<T> for QC3k2<T> {
    fn forward(&mut self, x: &QTensor<T>, train: bool) -> Result<QTensor<T>> {
        require_even(x.shape().channels, "QC3k2")?;
        let (x1, x2) = split_channels(x, self.half)?;
        let b = self.bottleneck.forward(&x1, train)?;
        self.fuse.forward(&concat_channels(&[&b, &x2])?, train)
    }

    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>> {
        let dcat = self.fuse.backward(dy)?;
        let (db, dx2) = split_channels(&dcat, self.half)?;
        let dx1 = self.bottleneck.backward(&db)?;
        concat_channels(&[&dx1, &dx2])
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.bottleneck.params();
        v.extend(self.fuse.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.bottleneck.params_mut();
        v.extend(self.fuse.params_mut());
        v
    }

    fn buffers(&self) -> Vec<(String, &[f64])> {
        self.bottleneck.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.bottleneck.buffers_mut()
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        require_even(input.channels, "QC3k2")?;
        self.fuse.output_shape(input)
    }
}

/// Three chained stride-1 max pools, concatenated with the input and mixed by
/// a 1×1 quaternion convolution.
pub struct QSPPF<T> {
    pool: PoolSpec,
    mix: QConv<T>,
    saved: Option<[(Shape, Vec<usize>); 3]>,
}

impl<T: Real> QSPPF<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(QSPPF {
            pool: PoolSpec::new(kernel, 1).padding(kernel / 2),
            mix: QConv::new(
                &format!("{name}.cv"),
                ConvSpec::new(4 * in_channels, out_channels, 1).mode(cfg.mode),
                true,
                cfg.init,
                rng,
            )?,
            saved: None,
        })
    }

    pub fn mix_conv_mut(&mut self) -> &mut QConv<T> {
        &mut self.mix
    }
}

impl<T: Real> Module<T> for QSPPF<T> {
    fn forward(&mut self, x: &QTensor<T>, train: bool) -> Result<QTensor<T>> {
        let (p1, i1) = qmaxpool(x, self.pool)?;
        let (p2, i2) = qmaxpool(&p1, self.pool)?;
        let (p3, i3) = qmaxpool(&p2, self.pool)?;
        let cat = concat_channels(&[x, &p1, &p2, &p3])?;
        self.saved = Some([(x.shape(), i1), (p1.shape(), i2), (p2.shape(), i3)]);
        self.mix.forward(&cat, train)
    }

    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>> {
        let saved = self.saved.as_ref().ok_or(QuanError::NoForward("QSPPF"))?;
        let dcat = self.mix.backward(dy)?;
        let c = saved[0].0.channels;
        let (d0, rest) = split_channels(&dcat, c)?;
        let (d1, rest) = split_channels(&rest, c)?;
        let (d2, d3) = split_channels(&rest, c)?;
        let add = |a: QTensor<T>, b: &QTensor<T>| -> QTensor<T> {
            let mut a = a;
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = T::from_f64(x.to_f64() + y.to_f64());
            }
            a
        };
        let g2 = add(qmaxpool_backward(saved[2].0, &saved[2].1, &d3)?, &d2);
        let g1 = add(qmaxpool_backward(saved[1].0, &saved[1].1, &g2)?, &d1);
        Ok(add(qmaxpool_backward(saved[0].0, &saved[0].1, &g1)?, &d0))
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.mix.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.mix.params_mut()
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        let pooled = self.pool.output_shape(input)?;
        self.mix
            .output_shape(Shape::new(input.batch, 4 * input.channels, pooled.height, pooled.width))
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Partial spatial attention: one channel half is scaled per position by a
/// shared weight in `[0, 1]`, then both halves are fused by a 1×1 convolution.
///
/// Scaling all four components of a quaternion by the same non-negative
/// number leaves its direction unchanged.
pub struct QC2PSA<T> {
    half: usize,
    score: QConv<T>,
    fuse: QConv<T>,
    saved: Option<AttnSaved<T>>,
}

struct AttnSaved<T> {
    branch: QTensor<T>,
    weights: Vec<f64>,
    attended: QTensor<T>,
}

impl<T: Real> QC2PSA<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        require_even(in_channels, "QC2PSA")?;
        let half = in_channels / 2;
        Ok(QC2PSA {
            half,
            score: QConv::new(
                &format!("{name}.attn"),
                ConvSpec::new(half, half, 1).mode(cfg.mode),
                true,
                cfg.init,
                rng,
            )?,
            fuse: QConv::new(
                &format!("{name}.cv"),
                ConvSpec::new(in_channels, out_channels, 1).mode(cfg.mode),
                true,
                cfg.init,
                rng,
            )?,
            saved: None,
        })
    }

    /// Attention weights of the last forward pass, `B × H × W`.
    pub fn attention_weights(&self) -> Option<&[f64]> {
        self.saved.as_ref().map(|s| s.weights.as_slice())
    }

    /// Attended half of the last forward pass and the half it was computed from.
    pub fn attended_branch(&self) -> Option<(&QTensor<T>, &QTensor<T>)> {
        self.saved.as_ref().map(|s| (&s.attended, &s.branch))
    }

    pub fn score_conv_mut(&mut self) -> &mut QConv<T> {
        &mut self.score
    }
}

impl<T: Real> Module<T> for QC2PSA<T> {
    fn forward(&mut self, x: &QTensor<T>, train: bool) -> Result<QTensor<T>> {
        require_even(x.shape().channels, "QC2PSA")?;
        let (a, rest) = split_channels(x, self.half)?;
        let z = self.score.forward(&a, train)?;
        let s = a.shape();
        let plane = s.plane();
        let norm = 1.0 / (s.channels * Q) as f64;
        let mut weights = vec![0.0f64; s.batch * plane];
        for b in 0..s.batch {
            let w = &mut weights[b * plane..(b + 1) * plane];
            for c in 0..s.channels {
                for (pos, px) in z.plane(b, c).chunks_exact(Q).enumerate() {
                    w[pos] += px.iter().map(|v| v.to_f64()).sum::<f64>();
                }
            }
            w.iter_mut().for_each(|v| *v = sigmoid(*v * norm));
        }
        let mut attended = a.clone();
        let chunk = plane * Q;
        for (n, plane_data) in attended.data_mut().chunks_exact_mut(chunk).enumerate() {
            let b = n / s.channels;
            for (pos, px) in plane_data.chunks_exact_mut(Q).enumerate() {
                let w = weights[b * plane + pos];
                px.iter_mut().for_each(|v| *v = T::from_f64(v.to_f64() * w));
            }
        }
        let y = self.fuse.forward(&concat_channels(&[&attended, &rest])?, train)?;
        self.saved = Some(AttnSaved {
            branch: a,
            weights,
            attended,
        });
        Ok(y)
    }

    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>> {
        let dcat = self.fuse.backward(dy)?;
        let saved = self.saved.as_ref().ok_or(QuanError::NoForward("QC2PSA"))?;
        let (datt, drest) = split_channels(&dcat, self.half)?;
        let s = saved.branch.shape();
        let plane = s.plane();
        let chunk = plane * Q;
        let norm = 1.0 / (s.channels * Q) as f64;

        // Gradient of each position's pre-sigmoid score.
        let mut dscore = vec![0.0f64; s.batch * plane];
        for (n, (g, a)) in datt
            .data()
            .chunks_exact(chunk)
            .zip(saved.branch.data().chunks_exact(chunk))
            .enumerate()
        {
            let b = n / s.channels;
            for (pos, (gp, ap)) in g.chunks_exact(Q).zip(a.chunks_exact(Q)).enumerate() {
                dscore[b * plane + pos] += gp.iter().zip(ap).map(|(x, y)| x.to_f64() * y.to_f64()).sum::<f64>();
            }
        }
        for (d, w) in dscore.iter_mut().zip(&saved.weights) {
            *d *= w * (1.0 - w) * norm;
        }
        let mut dz = QTensor::<T>::zeros(s);
        for (n, plane_data) in dz.data_mut().chunks_exact_mut(chunk).enumerate() {
            let b = n / s.channels;
            for (pos, px) in plane_data.chunks_exact_mut(Q).enumerate() {
                let v = T::from_f64(dscore[b * plane + pos]);
                px.iter_mut().for_each(|e| *e = v);
            }
        }
        let mut da = self.score.backward(&dz)?;
        for (n, (dst, g)) in da
            .data_mut()
            .chunks_exact_mut(chunk)
            .zip(datt.data().chunks_exact(chunk))
            .enumerate()
        {
            let b = n / s.channels;
            for (pos, (dp, gp)) in dst.chunks_exact_mut(Q).zip(g.chunks_exact(Q)).enumerate() {
                let w = saved.weights[b * plane + pos];
                for q in 0..Q {
                    dp[q] = T::from_f64(dp[q].to_f64() + w * gp[q].to_f64());
                }
            }
        }
        concat_channels(&[&da, &drest])
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.score.params();
        v.extend(self.fuse.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.score.params_mut();
        v.extend(self.fuse.params_mut());
        v
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        require_even(input.channels, "QC2PSA")?;
        self.fuse.output_shape(input)
    }
}
