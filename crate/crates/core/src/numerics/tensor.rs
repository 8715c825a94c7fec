//! Dense tensor storage in canonical batch×channel×height×width layout.

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt;

/// Element precision of a [`Tensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Real scalar usable as a tensor element. Double precision is the
/// verification mode (finite-difference checks), single precision the
/// production mode.
pub trait Scalar: Float + Send + Sync + fmt::Debug + fmt::Display + 'static {
    const DTYPE: Dtype;
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array. Rank 4 is the canonical layout for image
/// features; lower ranks hold biases and scalar losses.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {numel} elements but {} were provided",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Dimensions as (batch, channels, height, width); rank must be 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(Error::shape(format!(
                "expected rank-4 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.cast::<f64>()
    }

    /// Largest absolute elementwise difference, in f64. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "max_abs_diff: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent_and_bad_length() {
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn dims4_requires_rank_4() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        assert!(t.dims4().is_err());
        let t = Tensor::<f64>::zeros(&[1, 2, 3, 4]);
        assert_eq!(t.dims4().unwrap(), (1, 2, 3, 4));
    }

    #[test]
    fn cast_roundtrip_f32_exact_in_f64() {
        let t = Tensor::<f32>::from_fn(&[2, 2], |i| i as f32 * 0.25);
        let back: Tensor<f32> = t.to_f64().cast();
        assert_eq!(t, back);
    }
}
