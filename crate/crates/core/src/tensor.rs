//! Dense 4-D tensors in (batch, height, width, channel) order.
//!
//! Channel is the fastest-varying axis so per-pixel channel vectors are
//! contiguous. Every kernel in this crate is written against [`Tensor`].

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (inference) and `f64`
/// (gradient checking). Transcendentals go through `libm` so results do not
/// depend on the platform math library.
pub trait Scalar:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + MulAssign
    + Sum
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const NAME: &'static str;
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn erf(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn abs(self) -> Self;
    fn max(self, o: Self) -> Self;
    fn min(self, o: Self) -> Self;
    fn ln_1p(self) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::logf(self)
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        libm::tanhf(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline]
    fn max(self, o: Self) -> Self {
        f32::max(self, o)
    }
    #[inline]
    fn min(self, o: Self) -> Self {
        f32::min(self, o)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        libm::log1pf(self)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn max(self, o: Self) -> Self {
        f64::max(self, o)
    }
    #[inline]
    fn min(self, o: Self) -> Self {
        f64::min(self, o)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        libm::log1p(self)
    }
}

/// Extents of a tensor: batch, height, width, channel.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Number of pixels per image.
    pub fn area(&self) -> usize {
        self.h() * self.w()
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape([self.0[0], self.0[1], self.0[2], c])
    }

    /// Broadcast two shapes where an extent of 1 stretches to match.
    pub fn broadcast(a: Shape, b: Shape) -> Result<Shape> {
        let mut out = [0; 4];
        for i in 0..4 {
            let (x, y) = (a.0[i], b.0[i]);
            out[i] = if x == y {
                x
            } else if x == 1 {
                y
            } else if y == 1 {
                x
            } else {
                return Err(Error::shape(format!(
                    "cannot broadcast {a:?} with {b:?} (axis {i}: {x} vs {y})"
                )));
            };
        }
        Ok(Shape(out))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

impl From<[usize; 4]> for Shape {
    fn from(v: [usize; 4]) -> Self {
        Shape(v)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape:?} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn full(shape: impl Into<Shape>, v: T) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for y in 0..shape.h() {
                for x in 0..shape.w() {
                    for c in 0..shape.c() {
                        data.push(f([n, y, x, c]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![v],
        }
    }


    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn offset(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        let s = &self.shape.0;
        ((n * s[1] + y) * s[2] + x) * s[3] + c
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.offset(n, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: T) {
        let i = self.offset(n, y, x, c);
        self.data[i] = v;
    }

    /// Same data under a different shape with equal element count.
    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Channel vector at one pixel.
    #[inline]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[T] {
        let o = self.offset(n, y, x, 0);
        &self.data[o..o + self.shape.c()]
    }

    /// One image of the batch as its own tensor.
    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        let per = self.shape.h() * self.shape.w() * self.shape.c();
        Tensor {
            shape: Shape::new(1, self.shape.h(), self.shape.w(), self.shape.c()),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Rotates every image of the batch by 180 degrees.
    pub fn rotate180(&self) -> Tensor<T> {
        let s = self.shape;
        Tensor::from_fn(s, |[n, y, x, c]| self.at(n, s.h() - 1 - y, s.w() - 1 - x, c))
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor<{}>{:?} {:?}", std::any::type_name::<T>(), self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "...")?;
        }
        Ok(())
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::ZERO; 8];
    let chunks = n / 8;
    for i in 0..chunks {
        let aa = &a[i * 8..i * 8 + 8];
        let bb = &b[i * 8..i * 8 + 8];
        for k in 0..8 {
            acc[k] += aa[k] * bb[k];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec([1, 2, 2, 1], vec![0.0; 3]).is_err());
    }

    #[test]
    fn offsets_are_channel_last() {
        let t = Tensor::<f64>::from_fn([2, 3, 4, 5], |[n, y, x, c]| {
            (n * 1000 + y * 100 + x * 10 + c) as f64
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.pixel(0, 0, 1), &[10.0, 11.0, 12.0, 13.0, 14.0]);
    }

    #[test]
    fn broadcast_rules() {
        let a = Shape::new(1, 4, 4, 8);
        assert_eq!(Shape::broadcast(a, Shape::new(1, 4, 4, 1)).unwrap(), a);
        assert_eq!(Shape::broadcast(a, Shape::new(1, 1, 1, 8)).unwrap(), a);
        assert!(Shape::broadcast(a, Shape::new(1, 3, 4, 8)).is_err());
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
