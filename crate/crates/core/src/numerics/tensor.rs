use std::fmt;
use std::ops::{Deref, DerefMut};

use num_complex::Complex64;

use super::memtrack;
use crate::error::{FfmError, Result};

/// Element type of a [`Tensor`]. Everything is 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Real64,
    Complex128,
}

/// Fixed-length buffer whose size is reported to [`memtrack`].
pub struct Buffer<T> {
    data: Vec<T>,
}

impl<T> Buffer<T> {
    fn new(data: Vec<T>) -> Self {
        memtrack::on_alloc(data.len() * std::mem::size_of::<T>());
        Buffer { data }
    }

    pub fn into_vec(mut self) -> Vec<T> {
        let data = std::mem::take(&mut self.data);
        memtrack::on_free(data.len() * std::mem::size_of::<T>());
        data
    }
}

impl<T: Clone> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Buffer::new(self.data.clone())
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        memtrack::on_free(self.data.len() * std::mem::size_of::<T>());
    }
}

impl<T> Deref for Buffer<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Buffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: fmt::Debug> fmt::Debug for Buffer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.data.fmt(f)
    }
}

impl<T: PartialEq> PartialEq for Buffer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    Real(Buffer<f64>),
    Complex(Buffer<Complex64>),
}

/// Dense row-major array of `f64` or `Complex64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn real(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(FfmError::Dimension(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Data::Real(Buffer::new(data)) })
    }

    pub fn complex(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(FfmError::Dimension(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Data::Complex(Buffer::new(data)) })
    }

    pub fn zeros(shape: &[usize], dtype: Dtype) -> Self {
        let n = numel(shape);
        let data = match dtype {
            Dtype::Real64 => Data::Real(Buffer::new(vec![0.0; n])),
            Dtype::Complex128 => Data::Complex(Buffer::new(vec![Complex64::new(0.0, 0.0); n])),
        };
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: Data::Real(Buffer::new(vec![value])) }
    }

    /// 1-D real tensor.
    pub fn vector(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len()], data: Data::Real(Buffer::new(values.to_vec())) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            Data::Real(_) => Dtype::Real64,
            Data::Complex(_) => Dtype::Complex128,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            Data::Real(v) => v.len(),
            Data::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match &self.data {
            Data::Real(v) => Some(v),
            Data::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&[Complex64]> {
        match &self.data {
            Data::Complex(v) => Some(v),
            Data::Real(_) => None,
        }
    }

    pub fn as_real_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.data {
            Data::Real(v) => Some(v),
            Data::Complex(_) => None,
        }
    }

    pub fn as_complex_mut(&mut self) -> Option<&mut [Complex64]> {
        match &mut self.data {
            Data::Complex(v) => Some(v),
            Data::Real(_) => None,
        }
    }

    pub fn real_values(&self) -> Result<&[f64]> {
        self.as_real()
            .ok_or_else(|| FfmError::Dimension("expected a real tensor".into()))
    }

    pub fn complex_values(&self) -> Result<&[Complex64]> {
        self.as_complex()
            .ok_or_else(|| FfmError::Dimension("expected a complex tensor".into()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(FfmError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn is_finite(&self) -> bool {
        match &self.data {
            Data::Real(v) => v.iter().all(|x| x.is_finite()),
            Data::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }

    /// Largest absolute elementwise difference between two tensors of the same
    /// shape and dtype.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(FfmError::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        match (&self.data, &other.data) {
            (Data::Real(a), Data::Real(b)) => {
                Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            }
            (Data::Complex(a), Data::Complex(b)) => {
                Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max))
            }
            _ => Err(FfmError::Dimension("dtype mismatch".into())),
        }
    }

    pub fn to_complex(&self) -> Tensor {
        match &self.data {
            Data::Complex(_) => self.clone(),
            Data::Real(v) => Tensor {
                shape: self.shape.clone(),
                data: Data::Complex(Buffer::new(
                    v.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
                )),
            },
        }
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let rows = *self.shape.first().unwrap_or(&0);
        if start >= end || end > rows {
            return Err(FfmError::Dimension(format!(
                "row range {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let width = self.len() / rows;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        let data = match &self.data {
            Data::Real(v) => Data::Real(Buffer::new(v[start * width..end * width].to_vec())),
            Data::Complex(v) => Data::Complex(Buffer::new(v[start * width..end * width].to_vec())),
        };
        Ok(Tensor { shape, data })
    }
}

/// Build a real tensor from a closure over flat indices.
pub fn real_from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Tensor {
    let data: Vec<f64> = (0..numel(shape)).map(f).collect();
    Tensor { shape: shape.to_vec(), data: Data::Real(Buffer::new(data)) }
}

/// Build a complex tensor from a closure over flat indices.
pub fn complex_from_fn(shape: &[usize], f: impl FnMut(usize) -> Complex64) -> Tensor {
    let data: Vec<Complex64> = (0..numel(shape)).map(f).collect();
    Tensor { shape: shape.to_vec(), data: Data::Complex(Buffer::new(data)) }
}
