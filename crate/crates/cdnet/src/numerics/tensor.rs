//! Dense tensor storage: scalars, vectors, and row-major matrices.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Shape of a [`Tensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix { rows: usize, cols: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(d) => d,
            Shape::Matrix { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(d) => write!(f, "vector[{d}]"),
            Shape::Matrix { rows, cols } => write!(f, "matrix[{rows}x{cols}]"),
        }
    }
}

/// Dense tensor. Entries are checked to be finite at construction; NaN/Inf
/// inputs are rejected at operation boundaries rather than propagated.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: Vec<Real>,
    shape: Shape,
}

impl Tensor {
    pub fn scalar(value: Real) -> Result<Self> {
        Self::from_parts(vec![value], Shape::Scalar, "scalar constructor")
    }

    pub fn vector(data: Vec<Real>) -> Result<Self> {
        let d = data.len();
        Self::from_parts(data, Shape::Vector(d), "vector constructor")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "matrix constructor",
                details: format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            });
        }
        Self::from_parts(data, Shape::Matrix { rows, cols }, "matrix constructor")
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { data: vec![0.0; shape.len()], shape }
    }

    pub(crate) fn from_parts(data: Vec<Real>, shape: Shape, context: &str) -> Result<Self> {
        debug_assert_eq!(data.len(), shape.len());
        ensure_finite(&data, context)?;
        Ok(Tensor { data, shape })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a scalar tensor.
    ///
    /// # Panics
    /// Panics if the tensor is not a scalar; this is an internal programming
    /// error, not a recoverable condition.
    pub fn as_scalar(&self) -> Real {
        assert_eq!(self.shape, Shape::Scalar, "as_scalar on {}", self.shape);
        self.data[0]
    }

    /// Matrix entry accessor (row-major storage).
    pub fn at(&self, row: usize, col: usize) -> Real {
        match self.shape {
            Shape::Matrix { cols, .. } => self.data[row * cols + col],
            other => panic!("at() on {other}"),
        }
    }
}

pub(crate) fn ensure_finite(data: &[Real], context: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_entries() {
        assert!(Tensor::vector(vec![1.0, Real::NAN]).is_err());
        assert!(Tensor::scalar(Real::INFINITY).is_err());
        assert!(Tensor::vector(vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn matrix_shape_must_match_data() {
        assert!(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.at(1, 0), 3.0);
        assert_eq!(m.shape().len(), 4);
    }
}
