//! Quaternion network layers with explicit forward and backward passes.
//!
//! Every [`Module`] caches what it needs during `forward` and accumulates
//! parameter gradients during `backward`, so gradient accumulation across
//! micro-batches is just repeated backward calls before an optimizer step.

pub mod activation;
pub mod blocks;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod reference;

use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::{QTensor, Shape};

pub use activation::{activation_forward, Activation, ActivationKind};
pub use blocks::{conv_norm_act, BlockConfig, QBottleneck, QC2PSA, QC3k2, QSPPF};
pub use conv::{
    init_weights, qconv2d_backward, qconv2d_forward, qconv2d_forward_unfused, ConvGrads,
    ConvMode, ConvSpec, InitScheme, MixMatrix, OpCounter, QConv, QConvParams,
};
pub use linear::Linear;
pub use norm::{iqbn_backward, iqbn_forward, Iqbn, IqbnState};
pub use pool::{qmaxpool, qmaxpool_backward, GlobalAvgPool, PoolSpec, QMaxPool};

/// What a parameter tensor represents; drives parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Quaternion kernel bank shaped `(out, in, kh, kw, 4)`.
    QuatKernel,
    Bias,
    Scale,
    Shift,
    Slope,
    /// Real-valued dense weights.
    Dense,
}

/// A named learnable tensor with its 64-bit gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub kind: ParamKind,
    pub value: Vec<T>,
    pub grad: Vec<f64>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, kind: ParamKind, value: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            name: name.into(),
            dims,
            kind,
            value,
            grad,
        }
    }

    pub fn filled(name: impl Into<String>, dims: Vec<usize>, kind: ParamKind, v: f64) -> Self {
        let n = dims.iter().product();
        Param::new(name, dims, kind, vec![T::from_f64(v); n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub(crate) fn accumulate(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Scalar weights a real-valued layer of the same effective width would hold.
    pub fn real_equivalent_len(&self) -> usize {
        match self.kind {
            // (out, in, kh, kw, 4) quaternion taps become a 4·out × 4·in real kernel.
            ParamKind::QuatKernel => 4 * self.len(),
            _ => self.len(),
        }
    }
}

/// A differentiable layer over quaternion tensors.
pub trait Module<T: Real>: Send {
    fn forward(&mut self, x: &QTensor<T>, train: bool) -> Result<QTensor<T>>;

    /// Propagates `dy` back through the most recent `forward`, accumulating
    /// parameter gradients and returning the input gradient.
    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    /// Non-learnable state such as running statistics, by name.
    fn buffers(&self) -> Vec<(String, &[f64])> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        Vec::new()
    }

    fn output_shape(&self, input: Shape) -> Result<Shape>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<Box<dyn Module<T>>>,
}

impl<T: Real> Sequential<T> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Module<T> + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn with(mut self, layer: impl Module<T> + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Real> Module<T> for Sequential<T> {
    fn forward(&mut self, x: &QTensor<T>, train: bool) -> Result<QTensor<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>> {
        let mut cur = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn buffers(&self) -> Vec<(String, &[f64])> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.layers
            .iter()
            .try_fold(input, |s, l| l.output_shape(s))
    }
}
