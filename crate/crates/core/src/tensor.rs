//! Dense rank-4 tensors in batch-channel-height-width layout.
//!
//! Storage is generic over [`Scalar`] so the same graph can run in 32-bit
//! storage for training and inference, and in 64-bit storage for gradient
//! checks. Every kernel reads values as `f64` and accumulates in `f64`
//! regardless of the storage type.

use std::fmt::Debug;

use rand::Rng;

use crate::error::{shape_err, Result};

/// Element type a [`Tensor`] can store.
pub trait Scalar: Copy + Default + Debug + PartialEq + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Extents in (batch, channels, height, width) order.
pub type Dims = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "data length {} does not match dims {:?} (product {})",
                data.len(),
                dims,
                n
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![T::from_f64(value); n],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(T::from_f64(f([b, c, y, x])));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// Builds a tensor from `f64` values, rounding to the storage type.
    pub fn from_f64_vec(dims: Dims, values: Vec<f64>) -> Result<Self> {
        Self::new(dims, values.into_iter().map(T::from_f64).collect())
    }

    /// Values drawn uniformly from `[-bound, bound)`.
    pub fn uniform(dims: Dims, bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
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

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)].to_f64()
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = T::from_f64(v);
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| T::from_f64(f(v.to_f64()))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Copies batch item `b` out as a tensor with batch extent 1.
    pub fn batch_item(&self, b: usize) -> Self {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Stacks tensors with identical (C, H, W) along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = match items.first() {
            Some(t) => t,
            None => return shape_err("cannot stack an empty list"),
        };
        let mut data = Vec::new();
        let mut batch = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return shape_err(format!(
                    "cannot stack {:?} with {:?}",
                    t.dims, first.dims
                ));
            }
            batch += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: [batch, first.dims[1], first.dims[2], first.dims[3]],
            data,
        })
    }

    /// Spatial crop `[y0, y0+h) x [x0, x0+w)` of every batch item and channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.dims[2] || x0 + w > self.dims[3] {
            return shape_err(format!(
                "crop {}x{} at ({}, {}) exceeds {:?}",
                h, w, y0, x0, self.dims
            ));
        }
        let [b, c, _, _] = self.dims;
        let mut data = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for y in y0..y0 + h {
                    let s = self.index(bi, ci, y, x0);
                    data.extend_from_slice(&self.data[s..s + w]);
                }
            }
        }
        Ok(Tensor {
            dims: [b, c, h, w],
            data,
        })
    }
}

/// Converts a slice of `f64` into storage type `T`.
pub(crate) fn store<T: Scalar>(dims: Dims, values: Vec<f64>) -> Tensor<T> {
    debug_assert_eq!(dims.iter().product::<usize>(), values.len());
    Tensor {
        dims,
        data: values.into_iter().map(T::from_f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::<f32>::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn index_is_row_major_nchw() {
        let t = Tensor::<f32>::from_fn([2, 3, 4, 5], |[b, c, y, x]| {
            (b * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.index(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.index(1, 0, 0, 0), 60);
    }

    #[test]
    fn crop_and_stack() {
        let t = Tensor::<f64>::from_fn([1, 1, 4, 4], |[_, _, y, x]| (y * 4 + x) as f64);
        let c = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0]);
        let s = Tensor::stack(&[c.clone(), c]).unwrap();
        assert_eq!(s.dims(), [2, 1, 2, 2]);
        assert_eq!(s.batch_item(1).data(), &[6.0, 7.0, 10.0, 11.0]);
        assert!(t.crop(3, 3, 2, 2).is_err());
    }
}
