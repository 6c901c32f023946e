use super::Module;
use crate::error::{QuanError, Result};
use crate::scalar::Real;
use crate::tensor::{QTensor, Shape, Q};

/// Max pooling window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize) -> Self {
        PoolSpec {
            kernel,
            stride,
            padding: 0,
        }
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        if self.kernel == 0 || self.stride == 0 || 2 * self.padding > self.kernel {
            return Err(QuanError::Shape(format!("invalid pooling window {self:?}")));
        }
        let (ph, pw) = (s.height + 2 * self.padding, s.width + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(QuanError::Shape(format!(
                "pooling window {} larger than padded input {ph}x{pw}",
                self.kernel
            )));
        }
        Ok(Shape::new(
            s.batch,
            s.channels,
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }
}

/// Per-component max pooling. Padding never wins. Returns the pooled tensor
/// and, for every output element, the flat index of its source element
/// (first maximum in row-major window order).
pub fn qmaxpool<T: Real>(x: &QTensor<T>, spec: PoolSpec) -> Result<(QTensor<T>, Vec<usize>)> {
    let s = x.shape();
    let out = spec.output_shape(s)?;
    let mut y = QTensor::zeros(out);
    let mut argmax = vec![0usize; out.numel()];
    let xd = x.data();
    let mut n = 0;
    for b in 0..s.batch {
        for c in 0..s.channels {
            for oy in 0..out.height {
                for ox in 0..out.width {
                    for q in 0..Q {
                        let mut best: Option<(T, usize)> = None;
                        for u in 0..spec.kernel {
                            let iy = (oy * spec.stride + u) as isize - spec.padding as isize;
                            if iy < 0 || iy as usize >= s.height {
                                continue;
                            }
                            for v in 0..spec.kernel {
                                let ix = (ox * spec.stride + v) as isize - spec.padding as isize;
                                if ix < 0 || ix as usize >= s.width {
                                    continue;
                                }
                                let idx = x.offset(b, c, iy as usize, ix as usize) + q;
                                if best.map_or(true, |(m, _)| xd[idx] > m) {
                                    best = Some((xd[idx], idx));
                                }
                            }
                        }
                        let (m, idx) = best.expect("every window overlaps the input");
                        y.data_mut()[n] = m;
                        argmax[n] = idx;
                        n += 1;
                    }
                }
            }
        }
    }
    Ok((y, argmax))
}

/// Routes each output gradient to its recorded source element.
pub fn qmaxpool_backward<T: Real>(input: Shape, argmax: &[usize], dy: &QTensor<T>) -> Result<QTensor<T>> {
    if dy.len() != argmax.len() {
        return Err(QuanError::Shape("pooling gradient does not match forward output".into()));
    }
    let mut acc = vec![0.0f64; input.numel()];
    for (g, &idx) in dy.data().iter().zip(argmax) {
        acc[idx] += g.to_f64();
    }
    QTensor::from_vec(input.dims(), acc.into_iter().map(T::from_f64).collect())
}

pub struct QMaxPool {
    spec: PoolSpec,
    saved: Option<(Shape, Vec<usize>)>,
}

impl QMaxPool {
    pub fn new(spec: PoolSpec) -> Self {
        QMaxPool { spec, saved: None }
    }
}

impl<T: Real> Module<T> for QMaxPool {
    fn forward(&mut self, x: &QTensor<T>, _train: bool) -> Result<QTensor<T>> {
        let (y, idx) = qmaxpool(x, self.spec)?;
        self.saved = Some((x.shape(), idx));
        Ok(y)
    }

    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>> {
        let (shape, idx) = self.saved.as_ref().ok_or(QuanError::NoForward("max pool"))?;
        qmaxpool_backward(*shape, idx, dy)
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.spec.output_shape(input)
    }
}

/// Spatial mean per (batch, channel, component); output is `B × C × 1 × 1`.
#[derive(Default)]
pub struct GlobalAvgPool {
    input: Option<Shape>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { input: None }
    }
}

impl<T: Real> Module<T> for GlobalAvgPool {
    fn forward(&mut self, x: &QTensor<T>, _train: bool) -> Result<QTensor<T>> {
        let s = x.shape();
        let out = Shape::new(s.batch, s.channels, 1, 1);
        let mut y = QTensor::zeros(out);
        let inv = 1.0 / s.plane() as f64;
        for (dst, plane) in y.data_mut().chunks_exact_mut(Q).zip(x.data().chunks_exact(s.plane() * Q)) {
            let mut acc = [0.0f64; Q];
            for px in plane.chunks_exact(Q) {
                for q in 0..Q {
                    acc[q] += px[q].to_f64();
                }
            }
            for q in 0..Q {
                dst[q] = T::from_f64(acc[q] * inv);
            }
        }
        self.input = Some(s);
        Ok(y)
    }

    fn backward(&mut self, dy: &QTensor<T>) -> Result<QTensor<T>> {
        let s = self.input.ok_or(QuanError::NoForward("global average pool"))?;
        if dy.shape() != Shape::new(s.batch, s.channels, 1, 1) {
            return Err(QuanError::Shape(format!("pooled gradient {} does not match {s}", dy.shape())));
        }
        let inv = 1.0 / s.plane() as f64;
        let mut dx = QTensor::zeros(s);
        for (plane, g) in dx.data_mut().chunks_exact_mut(s.plane() * Q).zip(dy.data().chunks_exact(Q)) {
            for px in plane.chunks_exact_mut(Q) {
                for q in 0..Q {
                    px[q] = T::from_f64(g[q].to_f64() * inv);
                }
            }
        }
        Ok(dx)
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(Shape::new(input.batch, input.channels, 1, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let c = QTensor::<f64>::new([1, 2, 4, 4, 4], 1.5).unwrap();
        let (y, _) = qmaxpool(&c, PoolSpec::new(2, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));

        let x = QTensor::<f64>::from_vec([1, 1, 3, 3, 4], (0..36).map(|v| v as f64).collect()).unwrap();
        assert_eq!(qmaxpool(&x, PoolSpec::new(1, 1)).unwrap().0, x);

        let mut data = Vec::new();
        for v in [1.0, 2.0, 3.0, 4.0] {
            data.extend([v, -v, v * 10.0, 0.0]);
        }
        let x = QTensor::<f64>::from_vec([1, 1, 2, 2, 4], data).unwrap();
        let (y, idx) = qmaxpool(&x, PoolSpec::new(2, 2)).unwrap();
        assert_eq!(y.data(), &[4.0, -1.0, 40.0, 0.0]);
        // Tie on the k component resolves to the first position.
        assert_eq!(idx[3], 3);
        assert!(qmaxpool(&x, PoolSpec::new(3, 1)).is_err());
    }

    #[test]
    fn padded_pool_preserves_size_and_routes_gradient() {
        let x = QTensor::<f64>::from_vec([1, 1, 3, 3, 4], (0..36).map(|v| -(v as f64)).collect()).unwrap();
        let spec = PoolSpec::new(3, 1).padding(1);
        let mut pool = QMaxPool::new(spec);
        let y = Module::<f64>::forward(&mut pool, &x, true).unwrap();
        assert_eq!(y.shape(), x.shape());
        // Values are all ≤ 0, so zero padding would have won if it took part.
        assert!(y.data().iter().all(|&v| v <= 0.0));
        let dy = QTensor::new([1, 1, 3, 3, 4], 1.0).unwrap();
        let dx = pool.backward(&dy).unwrap();
        assert_eq!(dx.data().iter().sum::<f64>(), 36.0);
    }

    #[test]
    fn global_average() {
        let x = QTensor::<f64>::from_vec([1, 1, 2, 1, 4], vec![1., 2., 3., 4., 3., 4., 5., 6.]).unwrap();
        let mut gap = GlobalAvgPool::new();
        let y = gap.forward(&x, true).unwrap();
        assert_eq!(y.data(), &[2., 3., 4., 5.]);
        let dx = gap.backward(&QTensor::new([1, 1, 1, 1, 4], 2.0).unwrap()).unwrap();
        assert!(dx.data().iter().all(|&v| v == 1.0));
    }
}
