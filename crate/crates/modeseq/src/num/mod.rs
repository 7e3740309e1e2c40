//! Dense f64 matrix type and reverse-mode automatic differentiation.
//!
//! Everything the models need runs through [`Tape`]: forward ops record
//! their inputs, `backward` walks the record in reverse and accumulates
//! adjoints. The engine is deliberately small — two-axis tensors, double
//! precision, single-threaded — so that results are bit-reproducible and
//! every gradient can be checked against finite differences.

mod tape;

pub mod check;

pub use tape::{Mask, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Large negative constant standing in for -inf in additive attention masks.
pub const MASK_NEG: f64 = -1e30;
/// Entries at or below this additive value are treated as fully masked.
pub const MASK_THRESHOLD: f64 = -1e29;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: invalid shape {shape}")]
    InvalidShape { op: &'static str, shape: Shape },
    #[error("{op}: value count {got} does not match shape {shape}")]
    ValueCount { op: &'static str, shape: Shape, got: usize },
    #[error("backward requires a scalar (1x1) loss, got {0}")]
    NonScalarLoss(Shape),
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("attention: width {dim} is not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("{op}: index {index} out of bounds for {bound}")]
    IndexOutOfBounds { op: &'static str, index: usize, bound: usize },
    #[error("{op}: empty input list")]
    EmptyInput { op: &'static str },
}

/// Row/column extent of a two-axis tensor. Scalars are `1x1`, row vectors
/// `1xN`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Dense matrix with an optional gradient buffer.
///
/// `values` is row-major and always holds exactly `shape.len()` entries;
/// `grad`, when present, has the same length. Tensors with
/// `requires_grad = false` (frozen parameters, constants) never receive a
/// gradient buffer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Shape,
    pub values: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f64>, requires_grad: bool) -> Result<Self, NumError> {
        if values.len() != shape.len() {
            return Err(NumError::ValueCount { op: "Tensor::new", shape, got: values.len() });
        }
        Ok(Tensor { shape, values, requires_grad, grad: None })
    }

    pub fn zeros(rows: usize, cols: usize, requires_grad: bool) -> Self {
        Tensor {
            shape: Shape::new(rows, cols),
            values: vec![0.0; rows * cols],
            requires_grad,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumError::InvalidShape {
                    op: "Tensor::from_rows",
                    shape: Shape::new(r, row.len()),
                });
            }
            values.extend_from_slice(row);
        }
        Tensor::new(Shape::new(r, c), values, false)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.shape.rows && col < self.shape.cols);
        self.values[row * self.shape.cols + col]
    }

    /// Accumulate `delta` into the gradient buffer, allocating it lazily.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
