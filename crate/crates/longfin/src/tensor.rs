//! Dense row-major tensors.
//!
//! Values are carried in a flat buffer; the shape is a list of dimension
//! sizes whose product always equals the buffer length. Every op in the
//! numeric core rejects non-finite results instead of letting NaN/Inf
//! propagate silently.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
}

pub type NumericResult<T> = Result<T, NumericError>;

/// Dense row-major tensor. A rank-0 tensor (empty shape) holds one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Marks a leaf whose gradient should be accumulated by `backward`.
    pub requires_grad: bool,
    /// Filled by the training step after backward; same length as `data`.
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> NumericResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericError::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    /// Truncated-normal initialization (two-sigma cut), the transformer default.
    pub fn randn(shape: Vec<usize>, sigma: f64, rng: &mut crate::rng::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.trunc_normal::<S>(sigma)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// The single value of a rank-0 tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Element (i, j) of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Rows and columns of a rank-2 tensor; `op` labels the error.
    pub fn dims2(&self, op: &'static str) -> NumericResult<(usize, usize)> {
        if self.rank() != 2 {
            return Err(NumericError::ShapeMismatch {
                op,
                detail: format!("expected rank 2, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Convert the element type (used by the f64 verification mode and by
    /// the f32-on-disk checkpoint container).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn ensure_finite(&self, op: &'static str) -> NumericResult<()> {
        ensure_finite(op, &self.data)
    }

    /// Per-row index of the maximum (first index on ties) of a rank-2
    /// tensor.
    pub fn argmax_rows(&self) -> NumericResult<Vec<usize>> {
        let (rows, cols) = self.dims2("argmax_rows")?;
        if cols == 0 {
            return Err(NumericError::InvalidArg { op: "argmax_rows", detail: "zero columns".into() });
        }
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &self.data[i * cols..(i + 1) * cols];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}

pub fn ensure_finite<S: Scalar>(op: &'static str, data: &[S]) -> NumericResult<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericError::NonFinite { op })
    }
}
