//! Independent quaternion batch normalization.
//!
//! Each (channel, component) pair is normalized on its own, with statistics
//! taken over the batch and both spatial axes.

use super::{Module, Param, ParamKind};
use crate::error::{QuanError, Result};
use crate::scalar::Real;
use crate::tensor::{QTensor, Shape, Q};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Affine parameters and running statistics, all shaped `(C, 4)`.
#[derive(Debug, Clone)]
pub struct IqbnState<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> IqbnState<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        IqbnState {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels, Q], ParamKind::Scale, 1.0),
            beta: Param::filled(format!("{name}.beta"), vec![channels, Q], ParamKind::Shift, 0.0),
            running_mean: vec![0.0; channels * Q],
            running_var: vec![1.0; channels * Q],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len() / Q
    }
}

/// Batch statistics kept from a training-mode forward for the backward pass.
#[derive(Debug, Clone)]
struct Saved {
    shape: Shape,
    /// Normalized input before the affine transform.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

pub struct Iqbn<T> {
    pub state: IqbnState<T>,
    name: String,
    saved: Option<Saved>,
}

fn for_each_slot(shape: Shape, mut f: impl FnMut(usize, usize)) {
    // Calls f(flat index, channel·4 + component) in memory order.
    let plane = shape.plane() * Q;
    let mut n = 0;
    for _b in 0..shape.batch {
        for c in 0..shape.channels {
            for e in 0..plane {
                f(n, c * Q + e % Q);
                n += 1;
            }
        }
    }
}

impl<T: Real> Iqbn<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Iqbn {
            state: IqbnState::new(name, channels),
            name: name.to_string(),
            saved: None,
        }
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if shape.channels != self.state.channels() {
            return Err(QuanError::Shape(format!(
                "IQBN configured for {} channels, got {shape}",
                self.state.channels()
            )));
        }
        Ok(())
    }
}

/// Forward pass. Training mode normalizes with batch statistics and updates the
/// running estimates; inference uses the running estimates.
pub fn iqbn_forward<T: Real>(x: &QTensor<T>, layer: &mut Iqbn<T>, training: bool) -> Result<QTensor<T>> {
    let shape = x.shape();
    layer.check(shape)?;
    let slots = shape.channels * Q;
    let count = (shape.batch * shape.plane()) as f64;
    let s = &mut layer.state;
    let xd = x.data();

    let (mean, var) = if training {
        let mut mean = vec![0.0f64; slots];
        for_each_slot(shape, |n, k| mean[k] += xd[n].to_f64());
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f64; slots];
        for_each_slot(shape, |n, k| {
            let d = xd[n].to_f64() - mean[k];
            var[k] += d * d;
        });
        var.iter_mut().for_each(|v| *v /= count);
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for k in 0..slots {
            s.running_mean[k] = (1.0 - s.momentum) * s.running_mean[k] + s.momentum * mean[k];
            s.running_var[k] = (1.0 - s.momentum) * s.running_var[k] + s.momentum * var[k] * unbias;
        }
        (mean, var)
    } else {
        (s.running_mean.clone(), s.running_var.clone())
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + s.epsilon).sqrt()).collect();
    let mut xhat = vec![0.0f64; x.len()];
    let mut y = QTensor::zeros(shape);
    {
        let yd = y.data_mut();
        let (g, b) = (&s.gamma.value, &s.beta.value);
        for_each_slot(shape, |n, k| {
            let h = (xd[n].to_f64() - mean[k]) * inv_std[k];
            xhat[n] = h;
            yd[n] = T::from_f64(h * g[k].to_f64() + b[k].to_f64());
        });
    }
    layer.saved = training.then_some(Saved { shape, xhat, inv_std });
    Ok(y)
}

/// Input and affine gradients `(dx, dgamma, dbeta)` of the paired training-mode forward,
/// including the dependence of the batch mean and variance on `x`.
pub fn iqbn_backward<T: Real>(layer: &Iqbn<T>, dy: &QTensor<T>) -> Result<(QTensor<T>, Vec<f64>, Vec<f64>)> {
    let saved = layer.saved.as_ref().ok_or(QuanError::NoForward("IQBN"))?;
    let shape = saved.shape;
    if dy.shape() != shape {
        return Err(QuanError::Shape(format!(
            "IQBN gradient {} does not match forward input {shape}",
            dy.shape()
        )));
    }
    let slots = shape.channels * Q;
    let count = (shape.batch * shape.plane()) as f64;
    let gd = dy.data();
    let mut dgamma = vec![0.0f64; slots];
    let mut dbeta = vec![0.0f64; slots];
    for_each_slot(shape, |n, k| {
        let g = gd[n].to_f64();
        dbeta[k] += g;
        dgamma[k] += g * saved.xhat[n];
    });
    let gamma = &layer.state.gamma.value;
    // dx = γ·σ⁻¹·(dy − mean(dy) − x̂·mean(dy·x̂))
    let mut dx = QTensor::zeros(shape);
    {
        let dxd = dx.data_mut();
        for_each_slot(shape, |n, k| {
            let g = gd[n].to_f64();
            let v = gamma[k].to_f64()
                * saved.inv_std[k]
                * (g - dbeta[k] / count - saved.xhat[n] * dgamma[k] / count);
            dxd[n] = T::from_f64(v);
        });
    }
    Ok((dx, dgamma, dbeta))
}

impl<T: Real> Module<T> for Iqbn<T> {
    fn forward(&mut self, x: &QTensor<T>, train: bool) -> Result<QTensor<T>> {
        iqbn_forward(x, self, train)
    }

    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>> {
        let (dx, dgamma, dbeta) = iqbn_backward(self, dy)?;
        self.state.gamma.accumulate(&dgamma);
        self.state.beta.accumulate(&dbeta);
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.state.gamma, &self.state.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.state.gamma, &mut self.state.beta]
    }

    fn buffers(&self) -> Vec<(String, &[f64])> {
        vec![
            (format!("{}.running_mean", self.name), &self.state.running_mean[..]),
            (format!("{}.running_var", self.name), &self.state.running_var[..]),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            (format!("{}.running_mean", self.name), &mut self.state.running_mean[..]),
            (format!("{}.running_var", self.name), &mut self.state.running_var[..]),
        ]
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.check(input)?;
        Ok(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 5], seed: u64) -> QTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        QTensor::from_vec(dims, (0..n).map(|_| rng.random_range(-3.0..5.0)).collect()).unwrap()
    }

    /// Per-(channel, component) mean and biased variance by direct enumeration.
    fn stats(y: &QTensor<f64>) -> Vec<(f64, f64)> {
        let s = y.shape();
        let mut out = Vec::new();
        for c in 0..s.channels {
            for q in 0..4 {
                let view = y.component_slice(q).unwrap();
                let vals: Vec<f64> = (0..s.batch)
                    .flat_map(|b| (0..s.height).flat_map(move |h| (0..s.width).map(move |w| (b, h, w))))
                    .map(|(b, h, w)| view.get(b, c, h, w))
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                out.push((m, v));
            }
        }
        out
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = QTensor::<f64>::new([2, 3, 4, 4, 4], 2.5).unwrap();
        let mut bn = Iqbn::new("bn", 3);
        let y = bn.forward(&x, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_input_passes_through() {
        let x = random([4, 2, 8, 8, 4], 9);
        let mut bn = Iqbn::new("bn", 2);
        let z = bn.forward(&x, true).unwrap();
        let mut bn2 = Iqbn::new("bn2", 2);
        let again = bn2.forward(&z, true).unwrap();
        for (a, b) in again.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn training_output_statistics() {
        let x = random([4, 3, 8, 8, 4], 1);
        let mut bn = Iqbn::new("bn", 3);
        let y = bn.forward(&x, true).unwrap();
        for (m, v) in stats(&y) {
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3, "variance {v}");
        }
    }

    #[test]
    fn running_statistics_update() {
        let x = QTensor::<f64>::new([2, 1, 2, 2, 4], 3.0).unwrap();
        let mut bn = Iqbn::new("bn", 1);
        bn.forward(&x, true).unwrap();
        assert!(bn.state.running_mean.iter().all(|&m| (m - 0.3).abs() < 1e-12));
        assert!(bn.state.running_var.iter().all(|&v| (v - 0.9).abs() < 1e-12));
        // Inference uses the running estimates.
        let y = bn.forward(&x, false).unwrap();
        let expect = (3.0 - 0.3) / (0.9f64 + DEFAULT_EPSILON).sqrt();
        assert!(y.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn backward_contracts() {
        let x = random([2, 2, 3, 3, 4], 4);
        let mut bn = Iqbn::<f64>::new("bn", 2);
        assert!(matches!(bn.backward(&x), Err(QuanError::NoForward(_))));
        bn.forward(&x, true).unwrap();
        let (dx, dg, db) = iqbn_backward(&bn, &QTensor::zeros(x.shape())).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dg.iter().chain(&db).all(|&v| v == 0.0));
        let dy = random([2, 2, 3, 3, 4], 5);
        let (_, _, db) = iqbn_backward(&bn, &dy).unwrap();
        let direct: Vec<f64> = stats(&dy).iter().map(|(m, _)| m * 18.0).collect();
        for (a, b) in db.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(bn.forward(&random([1, 3, 2, 2, 4], 1), true).is_err());
    }
}
