//! Dense row-major tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is an immutable value: its buffer sits behind an `Arc`, so
//! clones are cheap and tensors can be shared between threads. All
//! differentiable computation goes through a [`Tape`], which records each
//! operation together with whatever it needs for the backward sweep.
//!
//! Broadcasting is deliberately absent. Shapes must match exactly, apart
//! from the scalar operations (`scale`, `add_scalar`) and the per-channel
//! `bias_add`.

mod kernels;
mod tape;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use tape::{Gradients, Tape, Var};

pub(crate) use kernels::{conv_output_len, pool_output_len};

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking the shape and that every value is finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: impl Into<Vec<f64>>) -> TensorResult<Self> {
        let shape = shape.into();
        let data = data.into();
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Self {
            shape,
            data: data.into(),
            requires_grad: false,
        })
    }

    /// Internal constructor for kernels that already guarantee the invariants
    /// except finiteness, which is checked here.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> TensorResult<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(Self {
            shape,
            data: data.into(),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> TensorResult<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> TensorResult<Self> {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> TensorResult<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> TensorResult<Self> {
        Self::new(vec![1], vec![value])
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> TensorResult<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    /// 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> TensorResult<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidArgument {
                op: "Tensor::from_rows",
                msg: "rows have different lengths".into(),
            });
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks whether a leaf created from this tensor participates in backward.
    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> TensorResult<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NonScalarLoss(self.shape.clone()))
        }
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> TensorResult<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    /// Row `i` of a 2-D tensor, or the `i`-th slice along the leading axis.
    pub fn index_axis0(&self, i: usize) -> TensorResult<Self> {
        if self.ndim() < 2 || i >= self.shape[0] {
            return Err(TensorError::InvalidArgument {
                op: "index_axis0",
                msg: format!("index {i} out of range for shape {:?}", self.shape),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        Self::new(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> TensorResult<Self> {
        let first = items.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "stack",
            msg: "nothing to stack".into(),
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    /// Applies `f` elementwise, keeping the shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> TensorResult<Self> {
        Self::from_op(
            "map",
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Non-differentiable matrix product, for value-level code paths.
    pub fn matmul(&self, rhs: &Tensor) -> TensorResult<Self> {
        let (m, k, n) = kernels::matmul_dims(self.shape(), rhs.shape())?;
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(self.data(), rhs.data(), &mut out, m, k, n);
        Self::from_op("matmul", vec![m, n], out)
    }

    pub fn transpose(&self) -> TensorResult<Self> {
        if self.ndim() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("needs a 2-D tensor, got {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Self::from_op(
            "transpose",
            vec![c, r],
            kernels::transpose(self.data(), r, c),
        )
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> TensorResult<f64> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, " {head:?}")?;
        if self.data.len() > PREVIEW {
            write!(f, " ..")?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> TensorResult<()> {
    if shape.is_empty() || shape.contains(&0) {
        Err(TensorError::InvalidShape(shape.to_vec()))
    } else {
        Ok(())
    }
}
