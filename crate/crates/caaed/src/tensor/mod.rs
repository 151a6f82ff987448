//! Dense tensors and a recorded-operation graph for reverse-mode differentiation.
//!
//! `Tensor` is detached storage: a shape plus a flat value buffer. All compute
//! goes through a [`Graph`], which records every primitive application and can
//! replay the recording backwards to accumulate gradients. Values are held as
//! `f64`; under [`Precision::Single`] (the default for training and inference)
//! every operation output is rounded through `f32`, so stored numbers are always
//! exactly representable in 32 bits. Gradient checking requires
//! [`Precision::Double`], where no rounding happens.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_params, DEFAULT_STEP};
pub use graph::{Graph, Var};

use crate::error::{Error, Result};

/// Numeric precision of a recorded computation.
///
/// `Single` rounds every operation output through `f32` (32-bit storage with
/// wide accumulation). `Double` keeps full `f64` values; finite-difference
/// gradient checks are meaningless without it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    #[inline]
    pub(crate) fn quantize(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }
}

/// Train/eval switch for operations whose behaviour differs between the two
/// (dropout, scheduled sampling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense n-dimensional array: a shape and a flat row-major value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and flat data. Every extent must be
    /// positive and the product of extents must equal the data length.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Usage(format!("tensor shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Usage(format!(
                "tensor shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Identity matrix of extent `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() requires a 2-D tensor");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every element through `f32`, making the tensor exactly
    /// representable in 32-bit storage.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}
