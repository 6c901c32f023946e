//! Rank-5 quaternion feature tensors, `B × C × H × W × 4`.
//!
//! Storage is row-major with the quaternion axis innermost: the four
//! components of one spatial position are adjacent in memory.

use crate::error::{QuanError, Result};
use crate::quaternion::Quaternion;
use crate::scalar::Real;

/// Number of quaternion components.
pub const Q: usize = 4;

/// Spatial/channel extent of a [`QTensor`]; the component axis is implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width * Q
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.batch, self.channels, self.height, self.width, Q]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}x4",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor<T> {
    shape: Shape,
    data: Vec<T>,
}

fn check_dims(dims: [usize; 5]) -> Result<Shape> {
    if dims[4] != Q {
        return Err(QuanError::Shape(format!(
            "quaternion axis must have extent 4, got {}",
            dims[4]
        )));
    }
    if dims.contains(&0) {
        return Err(QuanError::Shape(format!("zero-sized dimension in {dims:?}")));
    }
    Ok(Shape::new(dims[0], dims[1], dims[2], dims[3]))
}

impl<T: Real> QTensor<T> {
    /// Tensor of the given `[B, C, H, W, 4]` dimensions with every element set to `fill`.
    pub fn new(dims: [usize; 5], fill: T) -> Result<Self> {
        let shape = check_dims(dims)?;
        Ok(QTensor {
            shape,
            data: vec![fill; shape.numel()],
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        QTensor {
            shape,
            data: vec![T::ZERO; shape.numel()],
        }
    }

    pub fn from_vec(dims: [usize; 5], data: Vec<T>) -> Result<Self> {
        let shape = check_dims(dims)?;
        if data.len() != shape.numel() {
            return Err(QuanError::Shape(format!(
                "{} elements supplied for shape {shape}",
                data.len()
            )));
        }
        Ok(QTensor { shape, data })
    }

    /// Fills every position with the same quaternion.
    pub fn filled_with(shape: Shape, q: Quaternion) -> Self {
        let quad = q.to_array().map(T::from_f64);
        let data = (0..shape.numel()).map(|n| quad[n % Q]).collect();
        QTensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> [usize; 5] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        (((b * s.channels + c) * s.height + y) * s.width + x) * Q
    }

    pub fn quaternion(&self, b: usize, c: usize, y: usize, x: usize) -> Quaternion {
        let o = self.offset(b, c, y, x);
        Quaternion::new(
            self.data[o].to_f64(),
            self.data[o + 1].to_f64(),
            self.data[o + 2].to_f64(),
            self.data[o + 3].to_f64(),
        )
    }

    pub fn set_quaternion(&mut self, b: usize, c: usize, y: usize, x: usize, q: Quaternion) {
        let o = self.offset(b, c, y, x);
        for (d, v) in self.data[o..o + Q].iter_mut().zip(q.to_array()) {
            *d = T::from_f64(v);
        }
    }

    /// Elements of one `(b, c)` plane, `H·W·4` values.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let o = self.offset(b, c, 0, 0);
        &self.data[o..o + self.shape.plane() * Q]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> QTensor<T> {
        QTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts to another element type.
    pub fn cast<U: Real>(&self) -> QTensor<U> {
        QTensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Read view of quaternion component `q` (0 = r, 1 = i, 2 = j, 3 = k).
    pub fn component_slice(&self, q: usize) -> Result<ComponentView<'_, T>> {
        if q >= Q {
            return Err(QuanError::Index { index: q, limit: Q });
        }
        Ok(ComponentView {
            shape: self.shape,
            data: &self.data,
            q,
        })
    }

    pub fn component_slice_mut(&mut self, q: usize) -> Result<ComponentViewMut<'_, T>> {
        if q >= Q {
            return Err(QuanError::Index { index: q, limit: Q });
        }
        Ok(ComponentViewMut {
            shape: self.shape,
            data: &mut self.data,
            q,
        })
    }
}

/// Strided view of one quaternion component as a `B × C × H × W` array.
#[derive(Debug, Clone, Copy)]
pub struct ComponentView<'a, T> {
    shape: Shape,
    data: &'a [T],
    q: usize,
}

impl<'a, T: Real> ComponentView<'a, T> {
    pub fn dims(&self) -> [usize; 4] {
        let s = self.shape;
        [s.batch, s.channels, s.height, s.width]
    }

    pub fn component(&self) -> usize {
        self.q
    }

    fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        (((b * s.channels + c) * s.height + y) * s.width + x) * Q + self.q
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, c, y, x)]
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + 'a {
        self.data.iter().skip(self.q).step_by(Q).copied()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.iter().collect()
    }
}

/// Mutable strided view of one quaternion component.
#[derive(Debug)]
pub struct ComponentViewMut<'a, T> {
    shape: Shape,
    data: &'a mut [T],
    q: usize,
}

impl<T: Real> ComponentViewMut<'_, T> {
    fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        (((b * s.channels + c) * s.height + y) * s.width + x) * Q + self.q
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.data.iter_mut().skip(self.q).step_by(Q)
    }
}

/// Rebuilds a tensor from four component arrays laid out `B × C × H × W`.
pub fn assemble_components<T: Real>(shape: Shape, parts: [&[T]; 4]) -> Result<QTensor<T>> {
    let n = shape.numel() / Q;
    if parts.iter().any(|p| p.len() != n) {
        return Err(QuanError::Shape(format!(
            "component arrays must each hold {n} values"
        )));
    }
    let mut data = Vec::with_capacity(shape.numel());
    for idx in 0..n {
        for part in parts {
            data.push(part[idx]);
        }
    }
    Ok(QTensor { shape, data })
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(xs: &[&QTensor<T>]) -> Result<QTensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| QuanError::Shape("concat of zero tensors".into()))?
        .shape;
    for x in xs {
        let s = x.shape;
        if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
            return Err(QuanError::Shape(format!(
                "cannot concat {s} with {first}: batch/spatial extents differ"
            )));
        }
    }
    let channels = xs.iter().map(|x| x.shape.channels).sum();
    let shape = Shape::new(first.batch, channels, first.height, first.width);
    let mut data = Vec::with_capacity(shape.numel());
    for b in 0..first.batch {
        for x in xs {
            let block = x.shape.channels * x.shape.plane() * Q;
            data.extend_from_slice(&x.data[b * block..(b + 1) * block]);
        }
    }
    Ok(QTensor { shape, data })
}

/// Splits into channels `[0, at)` and `[at, C)`.
pub fn split_channels<T: Real>(x: &QTensor<T>, at: usize) -> Result<(QTensor<T>, QTensor<T>)> {
    let s = x.shape;
    if at == 0 || at >= s.channels {
        return Err(QuanError::Range(format!(
            "split point {at} must lie strictly inside 0..{}",
            s.channels
        )));
    }
    let plane = s.plane() * Q;
    let mut first = Vec::with_capacity(s.batch * at * plane);
    let mut second = Vec::with_capacity(s.batch * (s.channels - at) * plane);
    for chunk in x.data.chunks_exact(s.channels * plane) {
        first.extend_from_slice(&chunk[..at * plane]);
        second.extend_from_slice(&chunk[at * plane..]);
    }
    Ok((
        QTensor {
            shape: Shape::new(s.batch, at, s.height, s.width),
            data: first,
        },
        QTensor {
            shape: Shape::new(s.batch, s.channels - at, s.height, s.width),
            data: second,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 5]) -> QTensor<f32> {
        let n: usize = dims.iter().product();
        QTensor::from_vec(dims, (0..n).map(|v| v as f32 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn construction() {
        let t = QTensor::<f32>::new([1, 1, 1, 1, 4], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = QTensor::<f32>::new([2, 3, 4, 4, 4], 1.0).unwrap();
        assert_eq!(t.len(), 384);
        assert!(t.data().iter().all(|&v| v == 1.0));
        assert!(matches!(
            QTensor::<f32>::new([1, 1, 1, 1, 3], 0.0),
            Err(QuanError::Shape(_))
        ));
        assert!(QTensor::<f32>::new([1, 0, 1, 1, 4], 0.0).is_err());
    }

    #[test]
    fn component_views() {
        let t = QTensor::<f64>::filled_with(Shape::new(2, 2, 3, 3), Quaternion::new(1., 2., 3., 4.));
        assert!(t.component_slice(0).unwrap().iter().all(|v| v == 1.0));
        assert!(t.component_slice(3).unwrap().iter().all(|v| v == 4.0));
        assert_eq!(t.component_slice(3).unwrap().dims(), [2, 2, 3, 3]);
        assert!(matches!(t.component_slice(4), Err(QuanError::Index { .. })));

        let x = ramp([2, 3, 2, 5, 4]);
        let parts: Vec<Vec<f32>> = (0..4).map(|q| x.component_slice(q).unwrap().to_vec()).collect();
        let back = assemble_components(x.shape(), [&parts[0], &parts[1], &parts[2], &parts[3]]).unwrap();
        assert_eq!(back, x);
        assert_eq!(x.component_slice(2).unwrap().get(1, 2, 1, 3), x.quaternion(1, 2, 1, 3).j as f32);
    }

    #[test]
    fn component_views_are_disjoint_and_exhaustive() {
        let mut x = QTensor::<f32>::zeros(Shape::new(2, 2, 2, 2));
        for q in 0..4 {
            let mut view = x.component_slice_mut(q).unwrap();
            for v in view.iter_mut() {
                *v += (q + 1) as f32;
            }
        }
        for (n, v) in x.data().iter().enumerate() {
            assert_eq!(*v, (n % 4 + 1) as f32);
        }
        let mut view = x.component_slice_mut(1).unwrap();
        view.set(1, 1, 1, 1, -7.0);
        assert_eq!(x.quaternion(1, 1, 1, 1).i, -7.0);
    }

    #[test]
    fn concat_and_split() {
        let a = ramp([2, 2, 3, 3, 4]);
        let b = ramp([2, 3, 3, 3, 4]).map(|v| v + 100.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape().channels, 5);
        assert_eq!(c.quaternion(1, 2, 0, 0), b.quaternion(1, 0, 0, 0));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!((a2, b2), (a.clone(), b));

        let four = ramp([1, 4, 2, 2, 4]);
        let (l, r) = split_channels(&four, 1).unwrap();
        assert_eq!((l.shape().channels, r.shape().channels), (1, 3));
        assert!(matches!(split_channels(&four, 0), Err(QuanError::Range(_))));
        assert!(split_channels(&four, 4).is_err());
        let other = ramp([1, 1, 3, 2, 4]);
        assert!(matches!(concat_channels(&[&four, &other]), Err(QuanError::Shape(_))));
    }

    proptest! {
        #[test]
        fn split_inverts_concat(b in 1usize..3, c1 in 1usize..4, c2 in 1usize..4, h in 1usize..4, w in 1usize..4) {
            let x = ramp([b, c1, h, w, 4]);
            let y = ramp([b, c2, h, w, 4]).map(|v| -v);
            let (x2, y2) = split_channels(&concat_channels(&[&x, &y]).unwrap(), c1).unwrap();
            prop_assert_eq!(x2, x);
            prop_assert_eq!(y2, y);
        }
    }
}
