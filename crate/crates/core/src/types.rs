//! Shared domain types.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row tolerance on the unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Stable index of one corpus example, in `[0, D)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExampleId(pub u32);

impl ExampleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ExampleId {
    fn from(v: usize) -> Self {
        ExampleId(u32::try_from(v).expect("example index exceeds u32"))
    }
}

impl std::fmt::Display for ExampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("row {row} has norm {norm}, expected 1")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("row {0} is zero and cannot be normalised")]
    ZeroRow(usize),
    #[error("embedding data has {len} values, not a multiple of dim {dim}")]
    Shape { len: usize, dim: usize },
}

/// Row-major table of unit-norm projected features, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    data: Array2<f64>,
}

impl EmbeddingTable {
    /// Wraps rows that are already unit norm.
    pub fn new(data: Array2<f64>) -> Result<Self, EmbeddingError> {
        for (row, r) in data.axis_iter(Axis(0)).enumerate() {
            let norm = r.dot(&r).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL || !norm.is_finite() {
                return Err(EmbeddingError::NotUnitNorm { row, norm });
            }
        }
        Ok(Self { data })
    }

    /// L2-normalises every row.
    pub fn normalized(mut data: Array2<f64>) -> Result<Self, EmbeddingError> {
        for (row, mut r) in data.axis_iter_mut(Axis(0)).enumerate() {
            let norm = r.dot(&r).sqrt();
            if norm.is_nan() || norm <= 0.0 || !norm.is_finite() {
                return Err(EmbeddingError::ZeroRow(row));
            }
            r /= norm;
        }
        Ok(Self { data })
    }

    pub fn from_flat(dim: usize, values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(EmbeddingError::Shape { len: values.len(), dim });
        }
        let rows = values.len() / dim;
        Self::new(Array2::from_shape_vec((rows, dim), values).expect("shape checked"))
    }

    pub fn empty(dim: usize) -> Self {
        Self { data: Array2::zeros((0, dim)) }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Rows `idx` in order.
    pub fn select(&self, idx: &[usize]) -> EmbeddingTable {
        EmbeddingTable { data: self.data.select(Axis(0), idx) }
    }
}
