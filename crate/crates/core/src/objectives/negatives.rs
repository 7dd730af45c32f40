use ndarray::ArrayView1;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ObjectiveError, DEGENERATE_MASS};
use crate::rng::RngStream;
use crate::similarity::{masked_argmax, DistributionMatrix};

/// How in-batch negatives for the matching loss are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSampling {
    /// Proportional to the contrastive distribution, own index masked.
    #[default]
    Multinomial,
    /// Most similar non-matching candidate, ties to the lowest index.
    Argmax,
    /// Uniform over non-matching candidates (random negatives).
    Uniform,
}

/// In-batch negatives for every anchor of a batch of `N` aligned pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegativeAssignment {
    /// Negative text index for each image.
    pub text_for_image: Vec<usize>,
    /// Negative image index for each text.
    pub image_for_text: Vec<usize>,
    /// Rows that fell back to uniform because their off-diagonal mass vanished.
    pub degenerate_rows: usize,
}

impl HardNegativeAssignment {
    pub fn len(&self) -> usize {
        self.text_for_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_for_image.is_empty()
    }
}

/// Sampling weights for anchor `own`: its row with the own entry zeroed and
/// renormalised; uniform over the other entries when that mass vanishes.
/// The flag reports the fallback.
pub fn negative_weights(row: ArrayView1<'_, f64>, own: usize) -> (Vec<f64>, bool) {
    let mut w: Vec<f64> = row.to_vec();
    w[own] = 0.0;
    let mass: f64 = w.iter().sum();
    if mass < DEGENERATE_MASS || !mass.is_finite() {
        let u = 1.0 / (w.len() - 1) as f64;
        let w = (0..w.len()).map(|j| if j == own { 0.0 } else { u }).collect();
        return (w, true);
    }
    w.iter_mut().for_each(|x| *x /= mass);
    (w, false)
}

fn draw(row: ArrayView1<'_, f64>, own: usize, mode: NegativeSampling, rng: &mut RngStream) -> (usize, bool) {
    let n = row.len();
    match mode {
        NegativeSampling::Uniform => {
            let j = rng.random_range(0..n - 1);
            (if j >= own { j + 1 } else { j }, false)
        }
        NegativeSampling::Argmax => {
            let (w, degenerate) = negative_weights(row, own);
            let mut allowed = vec![true; n];
            allowed[own] = false;
            let w = ndarray::Array1::from(w);
            (masked_argmax(w.view(), &allowed).expect("n >= 2"), degenerate)
        }
        NegativeSampling::Multinomial => {
            let (w, degenerate) = negative_weights(row, own);
            let dist = WeightedIndex::new(&w).expect("weights have positive mass");
            (dist.sample(rng), degenerate)
        }
    }
}

/// For each image `i` draws a text `j ≠ i` from `p_v2t[i]`, then for each
/// text `j` an image `i ≠ j` from `p_t2v[j]`. Draw order is fixed, so the
/// result is a pure function of the inputs and the stream state.
pub fn select_hard_negatives(
    p_v2t: &DistributionMatrix,
    p_t2v: &DistributionMatrix,
    mode: NegativeSampling,
    rng: &mut RngStream,
) -> Result<HardNegativeAssignment, ObjectiveError> {
    let n = p_v2t.rows();
    for p in [p_v2t, p_t2v] {
        if p.rows() != n || p.cols() != n {
            return Err(ObjectiveError::Shape(format!(
                "negative sampling needs square {n}x{n} distributions, got {}x{}",
                p.rows(),
                p.cols()
            )));
        }
    }
    if n < 2 {
        return Err(ObjectiveError::BatchTooSmall { need: 2, got: n });
    }
    let mut degenerate_rows = 0;
    let mut text_for_image = Vec::with_capacity(n);
    for i in 0..n {
        let (j, d) = draw(p_v2t.row(i), i, mode, rng);
        degenerate_rows += d as usize;
        text_for_image.push(j);
    }
    let mut image_for_text = Vec::with_capacity(n);
    for j in 0..n {
        let (i, d) = draw(p_t2v.row(j), j, mode, rng);
        degenerate_rows += d as usize;
        image_for_text.push(i);
    }
    Ok(HardNegativeAssignment { text_for_image, image_for_text, degenerate_rows })
}
