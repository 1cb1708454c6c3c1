//! Dense row-major `f64` tensors.
//!
//! This is deliberately minimal: owned storage, explicit shapes, and the few
//! raw kernels (matrix products, fills) that the autodiff tape and the
//! optimizers need. No views, no implicit broadcasting — callers reshape and
//! broadcast explicitly through tape operations.

use rand::Rng;

use crate::error::{Error, Result};

/// Owned n-dimensional array of `f64` in row-major order.
///
/// A rank-0 tensor (empty shape, one element) represents a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    ///
    /// `fan_in` is the vector length for rank-1 tensors and everything but
    /// the last axis for higher ranks (the last axis is the output axis).
    pub fn uniform_init<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let fan_in = match shape.len() {
            0 => 1,
            1 => shape[0],
            _ => numel / shape[shape.len() - 1],
        }
        .max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Extracts the value of a rank-0 tensor.
    pub fn as_scalar(&self) -> Result<f64> {
        if !self.shape.is_empty() {
            return Err(Error::Contract(format!(
                "expected scalar, found shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element access by multi-index; convenience for tests and reports.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut offset = 0;
        let mut stride = 1;
        for axis in (0..self.shape.len()).rev() {
            assert!(index[axis] < self.shape[axis], "index out of bounds");
            offset += index[axis] * stride;
            stride *= self.shape[axis];
        }
        self.data[offset]
    }

    /// Same data under a new shape (element count must match).
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with `context` if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "{context} contains a non-finite element"
            )))
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

/// `out += a @ b` for row-major `a (m,k)`, `b (k,n)`, `out (m,n)`.
pub(crate) fn matmul_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a @ b^T` for `a (m,n)`, `b (k,n)`, `out (m,k)`.
pub(crate) fn matmul_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a^T @ b` for `a (m,k)`, `b (m,n)`, `out (k,n)`.
pub(crate) fn matmul_tn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}
