use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{Param, ParamKind};
use crate::error::{QuanError, Result};
use crate::scalar::Real;
use crate::tensor::QTensor;

/// Real-valued affine map from a flattened tensor (`B × C·H·W·4` features) to
/// `B × out` outputs, returned in 64-bit.
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_features: usize,
    out_features: usize,
    input: Option<QTensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = (0..in_features * out_features)
            .map(|_| T::from_f64(dist.sample(rng)))
            .collect();
        Linear {
            weight: Param::new(format!("{name}.weight"), vec![out_features, in_features], ParamKind::Dense, w),
            bias: Param::filled(format!("{name}.bias"), vec![out_features], ParamKind::Bias, 0.0),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&mut self, x: &QTensor<T>) -> Result<Vec<f64>> {
        let batch = x.shape().batch;
        let feats = x.len() / batch;
        if feats != self.in_features {
            return Err(QuanError::Shape(format!(
                "linear layer expects {} features, got {feats}",
                self.in_features
            )));
        }
        let mut out = vec![0.0f64; batch * self.out_features];
        for (row, xb) in out.chunks_exact_mut(self.out_features).zip(x.data().chunks_exact(feats)) {
            for (o, dst) in row.iter_mut().enumerate() {
                let w = &self.weight.value[o * feats..(o + 1) * feats];
                *dst = self.bias.value[o].to_f64()
                    + w.iter().zip(xb).map(|(a, b)| a.to_f64() * b.to_f64()).sum::<f64>();
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dout: &[f64]) -> Result<QTensor<T>> {
        let x = self.input.as_ref().ok_or(QuanError::NoForward("linear"))?;
        let batch = x.shape().batch;
        let feats = self.in_features;
        if dout.len() != batch * self.out_features {
            return Err(QuanError::Shape("linear output gradient has the wrong length".into()));
        }
        let mut dx = vec![0.0f64; x.len()];
        let mut dw = vec![0.0f64; self.weight.len()];
        let mut db = vec![0.0f64; self.out_features];
        for b in 0..batch {
            let xb = &x.data()[b * feats..(b + 1) * feats];
            let dxb = &mut dx[b * feats..(b + 1) * feats];
            for o in 0..self.out_features {
                let g = dout[b * self.out_features + o];
                db[o] += g;
                let w = &self.weight.value[o * feats..(o + 1) * feats];
                let dwo = &mut dw[o * feats..(o + 1) * feats];
                for f in 0..feats {
                    dwo[f] += g * xb[f].to_f64();
                    dxb[f] += g * w[f].to_f64();
                }
            }
        }
        self.weight.accumulate(&dw);
        self.bias.accumulate(&db);
        QTensor::from_vec(x.dims(), dx.into_iter().map(T::from_f64).collect())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
