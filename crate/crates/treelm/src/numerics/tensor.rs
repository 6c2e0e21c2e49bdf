//! Dense row-major f64 tensors.
//!
//! Tensors are immutable values: construction validates the shape/data
//! contract, and every public operation returns a fresh tensor. Cloning is
//! cheap (shared buffer). Buffer allocations feed the live-bytes high-water
//! mark in [`super::profile`].

use std::sync::Arc;

use crate::error::{Error, Result};

use super::profile;

/// Owned buffer with allocation tracking.
#[derive(Debug)]
struct Buf(Vec<f64>);

impl Buf {
    fn new(data: Vec<f64>) -> Self {
        profile::record_alloc(data.len() * std::mem::size_of::<f64>());
        Buf(data)
    }
}

impl Drop for Buf {
    fn drop(&mut self) {
        profile::record_dealloc(self.0.len() * std::mem::size_of::<f64>());
    }
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Buf>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape product matches the data length.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(Buf::new(data)),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(Buf::new(vec![0.0; numel])),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(Buf::new(vec![v])),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.0.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data.0
    }

    /// Number of rows when viewed as a 2-D array (first dimension).
    pub fn rows(&self) -> usize {
        *self.shape.first().unwrap_or(&0)
    }

    /// Row width when viewed as a 2-D array (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            if self.shape.is_empty() {
                0
            } else {
                1
            }
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::usage(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data.0[0])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data.0[i * c..(i + 1) * c]
    }

    /// Checks every entry is finite; NaN/Inf is a contract violation.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    #[inline]
    pub(crate) fn debug_check_finite(&self, context: &str) {
        debug_assert!(
            self.data.0.iter().all(|v| v.is_finite()),
            "non-finite value in {context}"
        );
    }

    /// Round-trips the data through f32, the checkpoint storage precision.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.0.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32_slice(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Tensor::from_vec(shape, data.iter().map(|&v| v as f64).collect())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.0 == other.data.0
    }
}
