//! Dense row-major tensors and the convolution pair the learner is built on.
//!
//! Layouts are fixed throughout the crate:
//! feature maps are `H×W×C`, label/weight maps are `H×W×D` and filter
//! kernels are `K×K×C×D`, all row-major with the last axis fastest.

mod conv;
pub mod ltt;

pub use conv::{conv2d, conv2d_input_adjoint, conv2d_transpose};
pub(crate) use conv::{conv2d_raw, conv2d_transpose_raw};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim("data length", len, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("tensor dimensions must be positive");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Interpret as `H×W×C`. A rank-2 tensor is read as a single channel.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [h, w] => Ok((*h, *w, 1)),
            [h, w, c] => Ok((*h, *w, *c)),
            _ => Err(Error::Shape {
                shape: self.shape.clone(),
                reason: "expected an H×W or H×W×C map".into(),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc + a * b))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, a| acc + a * a)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(s, o)| *s += a * o);
        Ok(())
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape.len() != other.shape.len() {
            return Err(Error::dim("rank", self.shape.len(), other.shape.len()));
        }
        for (axis, (a, b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(Error::dim(format!("axis {axis}"), *a, *b));
            }
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive and rank at least one".into(),
        });
    }
    Ok(())
}

/// Convolution kernel of shape `K×K×C×D` with odd `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterWeights {
    kernel: Tensor,
}

impl FilterWeights {
    pub fn zeros(k: usize, c: usize, d: usize) -> Result<Self> {
        check_kernel_size(k)?;
        Ok(FilterWeights {
            kernel: Tensor::zeros(&[k, k, c, d]),
        })
    }

    pub fn from_tensor(kernel: Tensor) -> Result<Self> {
        let shape = kernel.shape();
        if shape.len() != 4 || shape[0] != shape[1] {
            return Err(Error::Shape {
                shape: shape.to_vec(),
                reason: "kernel must be K×K×C×D".into(),
            });
        }
        check_kernel_size(shape[0])?;
        Ok(FilterWeights { kernel })
    }

    pub fn new(k: usize, c: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        check_kernel_size(k)?;
        Self::from_tensor(Tensor::new(vec![k, k, c, d], data)?)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.kernel
    }

    pub fn as_tensor_mut(&mut self) -> &mut Tensor {
        &mut self.kernel
    }

    pub fn into_tensor(self) -> Tensor {
        self.kernel
    }

    pub fn data(&self) -> &[f64] {
        self.kernel.data()
    }

    pub fn dot(&self, other: &FilterWeights) -> Result<f64> {
        self.kernel.dot(&other.kernel)
    }

    pub fn norm_sq(&self) -> f64 {
        self.kernel.norm_sq()
    }

    pub fn scale(&self, s: f64) -> FilterWeights {
        FilterWeights {
            kernel: self.kernel.scale(s),
        }
    }

    pub fn axpy(&mut self, a: f64, other: &FilterWeights) -> Result<()> {
        self.kernel.axpy(a, &other.kernel)
    }

    pub fn is_finite(&self) -> bool {
        self.kernel.is_finite()
    }
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and positive, got {k}"
        )));
    }
    Ok(())
}

/// Inner product of two equally shaped tensors.
pub fn dot(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.dot(b)
}

pub fn norm_sq(a: &Tensor) -> f64 {
    a.norm_sq()
}
