//! Dense row-major float tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with a row-major contiguous buffer.
///
/// Scalars use the empty shape `[]` (one element). Tensors are immutable
/// after creation and safe to share across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            });
        }
        ensure_finite("tensor", &data)?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); n] }
    }

    pub fn scalar(v: S) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero extents are rejected at construction
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                op: "item",
                detail: format!("expected one element, shape is {:?}", self.shape),
            })
        }
    }

    /// Copies rows `range` of the leading axis into a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(Error::ShapeMismatch { op: "slice_rows", detail: "scalar has no rows".into() });
        }
        let rows = self.shape[0];
        if start >= end || end > rows {
            return Err(Error::invalid(format!(
                "row range {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        let data = self.data[start * stride..end * stride].to_vec();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Copies the given rows of the leading axis, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(Error::ShapeMismatch { op: "gather_rows", detail: "scalar has no rows".into() });
        }
        let rows = self.shape[0];
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid(format!("row {i} out of bounds for {rows} rows")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }
}

pub(crate) fn ensure_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}
