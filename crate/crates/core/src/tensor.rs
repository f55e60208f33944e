//! Dense `f32` tensors with a fixed row-major layout.
//!
//! All reductions accumulate in `f64` so results do not depend on the
//! summation order chosen by a kernel.

use std::fmt;

use crate::error::{Error, Result};

/// Extents of a tensor, outermost first (`N, C, H, W` for images).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("rank must be at least 1".into()));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("extent {i} is zero in {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides, last dimension fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    /// Flat offset of a multi-index.
    pub fn flatten(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.rank() {
            return Err(Error::DimensionMismatch(format!(
                "index rank {} vs shape rank {}",
                index.len(),
                self.rank()
            )));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.0) {
            if i >= d {
                return Err(Error::Shape(format!("index {index:?} out of bounds for {:?}", self.0)));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn unflatten(&self, mut offset: usize) -> Result<Vec<usize>> {
        if offset >= self.numel() {
            return Err(Error::Shape(format!("offset {offset} out of bounds for {:?}", self.0)));
        }
        let mut index = vec![0; self.rank()];
        for (slot, &d) in index.iter_mut().zip(&self.0).rev() {
            *slot = offset % d;
            offset /= d;
        }
        Ok(index)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Dense row-major `f32` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![0.0; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: &[usize], value: f32) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> Result<f32> {
        Ok(self.data[self.shape.flatten(index)?])
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    /// Euclidean norm, accumulated in `f64`.
    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    /// Largest absolute value. NaN entries are ignored.
    pub fn max_abs(&self) -> f32 {
        max_abs(&self.data)
    }

    pub fn has_nonfinite(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    /// Concatenates flat payloads into a rank-1 tensor.
    pub fn concat(parts: &[&Tensor]) -> Result<Self> {
        let data: Vec<f32> = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        let n = data.len();
        Self::from_vec(&[n], data)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }
}

pub fn l2_norm(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn max_abs(xs: &[f32]) -> f32 {
    xs.iter().fold(0.0f32, |m, &x| if x.abs() > m { x.abs() } else { m })
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}
