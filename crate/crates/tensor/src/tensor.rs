use std::fmt;

use crate::{Result, Scalar, TensorError};

/// Dense row-major n-dimensional array.
///
/// Convolutional activations use the channel-major `[C, N, H, W]` layout so
/// that a convolution is a single matrix product and per-channel statistics
/// read contiguous memory. Dense activations use `[D, N]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Size { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::Size { shape: shape.to_vec(), len: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.axpy(T::one(), other)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(TensorError::Shape { expected: shape.to_vec(), got: self.shape.clone() });
        }
        Ok(())
    }

    /// Channel-major `[C, N, H, W]` dims, or an error for other ranks.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, n, h, w] => Ok((c, n, h, w)),
            _ => Err(TensorError::Rank { expected: 4, got: self.shape.clone() }),
        }
    }

    /// Dense `[D, N]` dims, or an error for other ranks.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [d, n] => Ok((d, n)),
            _ => Err(TensorError::Rank { expected: 2, got: self.shape.clone() }),
        }
    }

    /// Select a subset of the batch axis (axis 1) of a `[C, N, ...]` tensor.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        if self.rank() < 2 {
            return Err(TensorError::Rank { expected: 2, got: self.shape.clone() });
        }
        let c = self.shape[0];
        let n = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(c * indices.len() * inner);
        for ci in 0..c {
            for &i in indices {
                if i >= n {
                    return Err(TensorError::Index { index: i, len: n });
                }
                let start = (ci * n + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = indices.len();
        Ok(Self { shape, data })
    }

    /// Concatenate `[C, N_i, ...]` tensors along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Empty)?;
        let c = first.shape[0];
        let rest = first.shape[2..].to_vec();
        let inner: usize = rest.iter().product();
        let mut n_total = 0;
        for p in parts {
            if p.shape[0] != c || p.shape[2..] != rest[..] {
                return Err(TensorError::Shape { expected: first.shape.clone(), got: p.shape.clone() });
            }
            n_total += p.shape[1];
        }
        let mut data = Vec::with_capacity(c * n_total * inner);
        for ci in 0..c {
            for p in parts {
                let n = p.shape[1];
                let start = ci * n * inner;
                data.extend_from_slice(&p.data[start..start + n * inner]);
            }
        }
        let mut shape = vec![c, n_total];
        shape.extend(rest);
        Ok(Self { shape, data })
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_and_concat_batch_are_inverse() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        let a = t.select_batch(&[0]).unwrap();
        let b = t.select_batch(&[1, 2]).unwrap();
        let back = Tensor::concat_batch(&[&a, &b]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
