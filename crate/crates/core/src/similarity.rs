//! Cross-modal similarity scores and their normalised distributions.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::EmbeddingTable;

/// Row-sum tolerance for a distribution row.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("embedding dims differ: image {img} vs text {txt}")]
    DimMismatch { img: usize, txt: usize },
    #[error("empty embedding table")]
    EmptyTable,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
}

/// Direction of a normalised similarity: image→text rows range over texts,
/// text→image rows range over images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Direction {
    #[default]
    #[serde(rename = "v2t")]
    V2T,
    #[serde(rename = "t2v")]
    T2V,
}

impl Direction {
    pub fn flip(self) -> Direction {
        match self {
            Direction::V2T => Direction::T2V,
            Direction::T2V => Direction::V2T,
        }
    }
}

/// `s(V_i, T_j)` for every image row `i` and text row `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    data: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn from_array(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn get(&self, img: usize, txt: usize) -> f64 {
        self.data[[img, txt]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// Row-stochastic matrix `p^{v2t}` or `p^{t2v}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionMatrix {
    pub direction: Direction,
    data: Array2<f64>,
}

impl DistributionMatrix {
    /// Wraps `data` if every row is a probability vector.
    pub fn new(direction: Direction, data: Array2<f64>) -> Option<Self> {
        let ok = data.axis_iter(Axis(0)).all(|r| {
            r.iter().all(|&p| p >= 0.0 && p.is_finite()) && (r.sum() - 1.0).abs() <= ROW_SUM_TOL
        });
        ok.then_some(Self { direction, data })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

pub fn pairwise_scores(
    img: &EmbeddingTable,
    txt: &EmbeddingTable,
) -> Result<SimilarityMatrix, SimilarityError> {
    if img.dim() != txt.dim() {
        return Err(SimilarityError::DimMismatch { img: img.dim(), txt: txt.dim() });
    }
    if img.is_empty() || txt.is_empty() {
        return Err(SimilarityError::EmptyTable);
    }
    Ok(SimilarityMatrix { data: img.view().dot(&txt.view().t()) })
}

/// Max-subtracted softmax of each row of `logits / tau`.
pub fn softmax_rows(logits: ArrayView2<'_, f64>, tau: f64) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| ((x - max) / tau).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Normalises `scores` into `p^{v2t}` (rows of `S`) or `p^{t2v}` (rows of `Sᵀ`).
pub fn row_softmax(
    scores: &SimilarityMatrix,
    tau: f64,
    direction: Direction,
) -> Result<DistributionMatrix, SimilarityError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(SimilarityError::NonPositiveTemperature(tau));
    }
    let data = match direction {
        Direction::V2T => softmax_rows(scores.view(), tau),
        Direction::T2V => softmax_rows(scores.view().t(), tau),
    };
    Ok(DistributionMatrix { direction, data })
}

/// Index of the largest entry with `allowed[j]`; ties go to the lowest index.
pub fn masked_argmax(row: ArrayView1<'_, f64>, allowed: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in row.iter().enumerate() {
        if !allowed[j] {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((j, v)),
        }
    }
    best.map(|(j, _)| j)
}
