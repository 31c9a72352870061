//! Dense row-major tensors of rank 1 to 4 and the numerical kernels built on
//! them: convolution, pooling, elementwise maps, bilinear resizing and
//! point sampling, each paired with an explicit backward pass.
//!
//! Tensors are immutable value types; every operation returns a fresh tensor.
//! The element type is generic over [`Real`] so the exact same kernel code
//! runs in 32-bit for regular use and in 64-bit for gradient verification.

mod conv;
mod elementwise;
mod pool;
mod resize;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use elementwise::{
    add, add_backward, broadcast_add, broadcast_add_backward, broadcast_mul,
    broadcast_mul_backward, concat_channels, concat_channels_backward, mul, mul_backward,
    relu_neg_slope, relu_neg_slope_backward, scale, sigmoid, sigmoid_backward,
};
pub(crate) use elementwise::sigmoid_scalar;
pub use pool::{pool, pool_backward, PoolAxis, PoolKind};
pub use resize::{
    resize_bilinear, resize_bilinear_backward, sample_points_bilinear,
    sample_points_bilinear_backward,
};

use std::fmt;

use crate::error::{Error, Result};

/// Scalar element of a tensor: `f32` in regular runs, `f64` in verification
/// runs. Both dtypes execute identical generic code paths.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array of rank 1..=4.
///
/// Invariants enforced at construction: every extent is at least 1 and the
/// element count equals the product of the extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; numel],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(
        shape: impl Into<Vec<usize>>,
        mut f: impl FnMut(&[usize]) -> T,
    ) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        let mut index = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f(&index));
            for axis in (0..shape.len()).rev() {
                index[axis] += 1;
                if index[axis] < shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn dims1(&self) -> Result<usize> {
        match self.shape[..] {
            [a] => Ok(a),
            _ => Err(Error::shape("dims1", format!("expected rank 1, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape("dims2", format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape("dims3", format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape("dims4", format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        let (_, w) = (self.shape[0], self.shape[1]);
        self.data[i * w + j]
    }

    #[inline]
    pub fn at3(&self, a: usize, b: usize, c: usize) -> T {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(a * h + b) * w + c]
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let (ch, hh, ww) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * ch + c) * hh + h) * ww + w]
    }

    /// Same data, different shape; element counts must agree.
    pub fn with_shape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape(&shape)?;
        if numel != self.data.len() {
            return Err(Error::shape(
                "with_shape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts elementwise into another scalar type through f64.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Errors if any element is NaN or infinite.
    pub fn assert_finite(&self, context: &'static str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::validation(
                    context,
                    format!("non-finite value {} at flat index {}", v, i),
                ));
            }
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(
            "check_shape",
            format!("rank must be 1..=4, got {:?}", shape),
        ));
    }
    let mut numel = 1usize;
    for &extent in shape {
        if extent == 0 {
            return Err(Error::shape(
                "check_shape",
                format!("all extents must be >= 1, got {:?}", shape),
            ));
        }
        numel = numel
            .checked_mul(extent)
            .ok_or_else(|| Error::shape("check_shape", format!("element count overflow for {:?}", shape)))?;
    }
    Ok(numel)
}

/// Asserts two tensors carry identical shapes, naming the failing operation.
pub(crate) fn ensure_same_shape<T: Real>(
    context: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            context,
            format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}
