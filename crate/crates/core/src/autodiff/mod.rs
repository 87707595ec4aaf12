//! Minimal reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]s: row-major `f64` arrays with a shape. A
//! [`Tape`] records every operation whose inputs require gradients and
//! replays the record backwards from a scalar root. Tapes are rebuilt every
//! training step; clearing a tape invalidates every tensor it produced.
//!
//! ```
//! use rdroute::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::scalar(3.0));
//! let y = tape.mul(&x, &x).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.get(&x).unwrap(), &[6.0]);
//! ```

mod optim;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use optim::Sgd;
pub use tape::{Gradients, OpKind, Tape};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// An n-dimensional array of 64-bit reals, optionally tracked by a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a constant tensor; fails unless the shape's extents multiply to `values.len()`.
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::ValueCount {
                shape,
                len: values.len(),
            });
        }
        Ok(Self {
            shape,
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            values: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            values: Arc::new(vec![value; n]),
            node: None,
        }
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            shape: vec![n, 1],
            values: Arc::new(values),
            node: None,
        }
    }

    /// Stacks equal-length rows into an `[n, m]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub(crate) fn tracked(shape: Vec<usize>, values: Arc<Vec<f64>>, node: NodeRef) -> Self {
        Self {
            shape,
            values,
            node: Some(node),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when the tensor is recorded on a tape and will receive a gradient.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    /// Number of rows of a rank-2 tensor (the leading extent otherwise).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Width of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    /// Same values, cut off from any tape. Never accumulates gradient.
    pub fn detach(&self) -> Tensor {
        Self {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn shared_values(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Compares shape and values only.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}
