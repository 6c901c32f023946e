//! Component-wise activations.

use std::fmt;
use std::str::FromStr;

use super::{Module, Param, ParamKind};
use crate::error::{QuanError, Result};
use crate::scalar::Real;
use crate::tensor::{QTensor, Shape, Q};

/// Initial negative-side slope of QPReLU.
pub const QPRELU_INIT_SLOPE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ActivationKind {
    #[default]
    Silu,
    Relu,
    /// Leaky rectifier with a learnable slope per quaternion component.
    Qprelu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [ActivationKind::Silu, ActivationKind::Relu, ActivationKind::Qprelu];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Silu => "silu",
            ActivationKind::Relu => "relu",
            ActivationKind::Qprelu => "qprelu",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = QuanError;

    fn from_str(s: &str) -> Result<Self> {
        ActivationKind::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| QuanError::Config(format!("unknown activation '{s}' (expected silu, relu or qprelu)")))
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

pub struct Activation<T> {
    kind: ActivationKind,
    /// Present only for QPReLU: one slope per component.
    pub slope: Option<Param<T>>,
    input: Option<QTensor<T>>,
}

impl<T: Real> Activation<T> {
    pub fn new(name: &str, kind: ActivationKind) -> Self {
        let slope = (kind == ActivationKind::Qprelu)
            .then(|| Param::filled(format!("{name}.slope"), vec![Q], ParamKind::Slope, QPRELU_INIT_SLOPE));
        Activation {
            kind,
            slope,
            input: None,
        }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }
}

/// Applies the activation to every component independently.
pub fn activation_forward<T: Real>(x: &QTensor<T>, kind: ActivationKind, slopes: Option<&[T]>) -> QTensor<T> {
    let mut y = x.clone();
    match kind {
        ActivationKind::Silu => y.data_mut().iter_mut().for_each(|v| *v = T::from_f64(silu(v.to_f64()))),
        ActivationKind::Relu => y
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::from_f64(v.to_f64().max(0.0))),
        ActivationKind::Qprelu => {
            let a = slopes.expect("qprelu needs slopes");
            for px in y.data_mut().chunks_exact_mut(Q) {
                for q in 0..Q {
                    let v = px[q].to_f64();
                    if v < 0.0 {
                        px[q] = T::from_f64(a[q].to_f64() * v);
                    }
                }
            }
        }
    }
    y
}

impl<T: Real> Module<T> for Activation<T> {
    fn forward(&mut self, x: &QTensor<T>, _train: bool) -> Result<QTensor<T>> {
        let y = activation_forward(x, self.kind, self.slope.as_ref().map(|s| s.value.as_slice()));
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>> {
        let x = self.input.as_ref().ok_or(QuanError::NoForward("activation"))?;
        if dy.shape() != x.shape() {
            return Err(QuanError::Shape(format!("activation gradient {} vs input {}", dy.shape(), x.shape())));
        }
        let mut dx = dy.clone();
        match self.kind {
            ActivationKind::Silu => {
                for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
                    *d = T::from_f64(d.to_f64() * silu_grad(v.to_f64()));
                }
            }
            ActivationKind::Relu => {
                for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v.to_f64() <= 0.0 {
                        *d = T::ZERO;
                    }
                }
            }
            ActivationKind::Qprelu => {
                let slope = self.slope.as_mut().expect("qprelu has slopes");
                let mut ds = [0.0f64; Q];
                for (dpx, xpx) in dx.data_mut().chunks_exact_mut(Q).zip(x.data().chunks_exact(Q)) {
                    for q in 0..Q {
                        let v = xpx[q].to_f64();
                        if v < 0.0 {
                            let g = dpx[q].to_f64();
                            ds[q] += g * v;
                            dpx[q] = T::from_f64(g * slope.value[q].to_f64());
                        }
                    }
                }
                slope.accumulate(&ds);
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.slope.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.slope.iter_mut().collect()
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(input)
    }
}
