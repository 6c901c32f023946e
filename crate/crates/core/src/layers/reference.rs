//! Naive reference convolutions, written term by term from the component
//! formulas. Slow by design; used as oracles for the fused kernels.

use crate::error::Result;
use crate::layers::conv::{ConvMode, QConvParams};
use crate::scalar::Real;
use crate::tensor::{QTensor, Q};

/// Input quaternion at a padded position, or zero outside the image.
fn input_at<T: Real>(x: &QTensor<T>, b: usize, i: usize, y: isize, xx: isize) -> [f64; 4] {
    let s = x.shape();
    if y < 0 || xx < 0 || y as usize >= s.height || xx as usize >= s.width {
        return [0.0; 4];
    }
    let at = x.offset(b, i, y as usize, xx as usize);
    std::array::from_fn(|q| x.data()[at + q].to_f64())
}

fn weight_at<T: Real>(p: &QConvParams<'_, T>, o: usize, i: usize, u: usize, v: usize) -> [f64; 4] {
    let s = &p.spec;
    let at = (((o * s.in_channels + i) * s.kernel_h + u) * s.kernel_w + v) * Q;
    std::array::from_fn(|q| p.weights[at + q].to_f64())
}

/// Evaluates `y[b,o,oy,ox] = bias[o] + Σ_i Σ_u Σ_v f(W[o,i,u,v], x[b,i,iy,ix])`.
fn naive<T: Real>(x: &QTensor<T>, p: &QConvParams<'_, T>, f: impl Fn([f64; 4], [f64; 4]) -> [f64; 4]) -> Result<QTensor<T>> {
    let spec = p.spec;
    let out = spec.output_shape(x.shape())?;
    let mut y = QTensor::zeros(out);
    for b in 0..out.batch {
        for o in 0..out.channels {
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let mut acc: [f64; 4] = match p.bias {
                        Some(bv) => std::array::from_fn(|q| bv[o * Q + q].to_f64()),
                        None => [0.0; 4],
                    };
                    for i in 0..spec.in_channels {
                        for u in 0..spec.kernel_h {
                            for v in 0..spec.kernel_w {
                                let iy = (oy * spec.stride + u) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + v) as isize - spec.padding as isize;
                                let t = f(weight_at(p, o, i, u, v), input_at(x, b, i, iy, ix));
                                for q in 0..Q {
                                    acc[q] += t[q];
                                }
                            }
                        }
                    }
                    let at = y.offset(b, o, oy, ox);
                    for (dst, a) in y.data_mut()[at..at + Q].iter_mut().zip(acc) {
                        *dst = T::from_f64(a);
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Full quaternion convolution, all sixteen weight/input component products.
pub fn full_hamilton_reference<T: Real>(x: &QTensor<T>, p: &QConvParams<'_, T>) -> Result<QTensor<T>> {
    naive(x, p, |[wr, wi, wj, wk], [xr, xi, xj, xk]| {
        [
            wr * xr - wi * xi - wj * xj - wk * xk,
            wr * xi + wi * xr + wj * xk - wk * xj,
            wr * xj - wi * xk + wj * xr + wk * xi,
            wr * xk + wi * xj - wj * xi + wk * xr,
        ]
    })
}

/// Separable convolution: same-component products only, with their fixed signs.
pub fn separable_reference<T: Real>(x: &QTensor<T>, p: &QConvParams<'_, T>) -> Result<QTensor<T>> {
    naive(x, p, |[wr, wi, wj, wk], [xr, xi, xj, xk]| {
        let (r, i, j, k) = (wr * xr, wi * xi, wj * xj, wk * xk);
        [r - i - j - k, r + i + j - k, r - i + j + k, r + i - j + k]
    })
}

/// Dispatches on the mode of `p`.
pub fn reference_forward<T: Real>(x: &QTensor<T>, p: &QConvParams<'_, T>) -> Result<QTensor<T>> {
    match p.spec.mode {
        ConvMode::Separable => separable_reference(x, p),
        ConvMode::FullHamilton => full_hamilton_reference(x, p),
    }
}
