//! Dense NCHW tensors and the numeric kernels every model component is
//! built from.
//!
//! All kernels are pure functions of their inputs. Kernels that have a
//! reverse-mode adjoint expose it next to the forward pass (`*_backward`);
//! the tape in [`crate::autodiff`] only dispatches to them.

mod concat;
mod conv;
mod element;
mod norm;
mod pointwise;
mod pool;
mod resize;
mod sample;
mod softmax;

pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use element::Element;
pub use norm::{
    batch_norm, batch_norm_backward_eval, batch_norm_backward_train, batch_norm_eval, batch_norm_train, BatchStats,
    BnGrads, BnParams, BN_EPS, BN_MOMENTUM,
};
pub use pointwise::{pointwise, relu, relu_backward, Pointwise, PointwiseArg};
pub use pool::{max_pool2d, max_pool2d_backward, MaxPoolOutput};
pub use resize::{bilinear_resize, bilinear_resize_backward, lerp, AxisPlan, ResizeConvention};
pub use sample::{grid_sample, grid_sample_backward, SampleGrid};
pub use softmax::{argmax_channels, log_softmax_channels, softmax_channels, softmax_stack};

use crate::error::{Error, Result};

/// Batch, channel, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn with_n(self, n: usize) -> Self {
        Dims { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Dims { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Dims { h, w, ..self }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor, contiguous row-major in NCHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    dims: Dims,
    data: Vec<T>,
    name: Option<String>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if dims.n == 0 || dims.c == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::Config(format!("tensor dims must be >= 1, got {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::dim("tensor", "data", dims.len(), data.len()));
        }
        Ok(Tensor { dims, data, name: None })
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        assert!(!dims.is_empty(), "tensor dims must be >= 1");
        Tensor {
            dims,
            data: vec![value; dims.len()],
            name: None,
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Tensor { dims, data, name: None }
    }

    /// A channel vector stored as `(len, 1, 1, 1)`.
    pub fn vector(values: Vec<T>) -> Self {
        let dims = Dims::new(values.len(), 1, 1, 1);
        Tensor::from_vec(dims, values).expect("non-empty vector")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::filled(Dims::new(1, 1, 1, 1), value)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let d = self.dims;
        ((n * d.c + c) * d.h + y) * d.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    /// Contiguous `(c, h, w)` block of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.dims.sample();
        &self.data[n * s..(n + 1) * s]
    }

    /// Contiguous `(h, w)` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        if dims.len() != self.dims.len() {
            return Err(Error::dim("reshape", "len", self.dims.len(), dims.len()));
        }
        Ok(Tensor { dims, ..self })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            name: None,
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            name: self.name.clone(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.dims, other.dims, "max_abs_diff: dims differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool
    where
        T: BitRepr,
    {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(a, b)| a.bits() == b.bits())
    }

    /// Adds `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims, "accumulate: dims differ");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub(crate) fn expect_dims(&self, op: &'static str, dims: Dims) -> Result<()> {
        check_same(op, self.dims, dims)
    }
}

/// Exact bit pattern of a float, for bitwise comparisons.
pub trait BitRepr {
    fn bits(&self) -> u64;
}

impl BitRepr for f32 {
    fn bits(&self) -> u64 {
        self.to_bits() as u64
    }
}

impl BitRepr for f64 {
    fn bits(&self) -> u64 {
        self.to_bits()
    }
}

pub(crate) fn check_same(op: &'static str, expected: Dims, got: Dims) -> Result<()> {
    if expected.n != got.n {
        return Err(Error::dim(op, "batch", expected.n, got.n));
    }
    if expected.c != got.c {
        return Err(Error::dim(op, "channels", expected.c, got.c));
    }
    if expected.h != got.h {
        return Err(Error::dim(op, "height", expected.h, got.h));
    }
    if expected.w != got.w {
        return Err(Error::dim(op, "width", expected.w, got.w));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_wrong_length() {
        assert!(Tensor::<f32>::from_vec(Dims::new(1, 0, 1, 1), vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(Dims::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn offset_is_row_major_nchw() {
        let t = Tensor::<f32>::from_fn(Dims::new(2, 3, 4, 5), |[n, c, y, x]| {
            (n * 1000 + c * 100 + y * 10 + x) as f32
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.offset(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.plane(1, 2)[3 * 5 + 4], 1234.0);
    }
}
