//! Evaluation: masked-token usage of vision, toy retrieval recall and
//! hard-negative statistics.

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::objectives::{mask_tokens, HardNegativeAssignment, MaskingScheme};
use crate::rng::RngStream;
use crate::toymodel::{SyntheticCorpus, ToyError, ToyModel};
use crate::grit::EpochSchedule;
use crate::types::{EmbeddingTable, ExampleId};

/// Evaluation mask grid used when none is given.
pub const DEFAULT_MASK_GRID: [f64; 4] = [0.15, 0.35, 0.5, 0.75];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation slice is empty")]
    EmptySlice,
    #[error("k = {k} exceeds slice size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("example {0} is part of the training range")]
    NotHeldOut(ExampleId),
    #[error("image and text tables differ: {0} vs {1} rows")]
    Misaligned(usize, usize),
    #[error(transparent)]
    Toy(#[from] ToyError),
}

/// Position of the true pair: candidates scoring strictly higher, plus
/// ties with a lower index.
fn rank_of(row: ArrayView1<'_, f64>, target: usize) -> usize {
    let s = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub k: usize,
    pub i2t: f64,
    pub t2i: f64,
}

impl RecallRow {
    pub fn mean(&self) -> f64 {
        0.5 * (self.i2t + self.t2i)
    }
}

/// R@k in both directions for aligned feature tables (row `i` pairs with row `i`).
pub fn recall_at_k(img: &EmbeddingTable, txt: &EmbeddingTable, ks: &[usize]) -> Result<Vec<RecallRow>, EvalError> {
    let n = img.rows();
    if n == 0 {
        return Err(EvalError::EmptySlice);
    }
    if txt.rows() != n {
        return Err(EvalError::Misaligned(n, txt.rows()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > n || k == 0) {
        return Err(EvalError::KTooLarge { k, n });
    }
    let scores = img.view().dot(&txt.view().t());
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(scores.row(i), i)).collect();
    let t2i: Vec<usize> = (0..n).map(|j| rank_of(scores.column(j), j)).collect();
    let frac = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(ks.iter().map(|&k| RecallRow { k, i2t: frac(&i2t, k), t2i: frac(&t2i, k) }).collect())
}

/// Encodes `ids` with `model` and ranks within that slice.
pub fn retrieval_at_k(
    model: &ToyModel,
    corpus: &SyntheticCorpus,
    ids: &[ExampleId],
    ks: &[usize],
) -> Result<Vec<RecallRow>, EvalError> {
    if ids.is_empty() {
        return Err(EvalError::EmptySlice);
    }
    let enc = model.encode_batch(corpus.batch_images(ids).view(), corpus.batch_tokens(ids).view())?;
    recall_at_k(&enc.img, &enc.txt, ks)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HardnessReport {
    pub negatives: usize,
    pub mean_neg_sim: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub same_cluster_frac: f64,
    pub intra_batch_sim: f64,
}

/// Running totals over the batches of one epoch.
#[derive(Debug, Clone, Default)]
pub struct HardnessAccumulator {
    neg_sims: Vec<f64>,
    same_cluster: usize,
    intra_sum: f64,
    intra_pairs: usize,
}

impl HardnessAccumulator {
    /// `scores[i][j] = s(V_i, T_j)` for one batch; `labels` are the batch's
    /// cluster labels in row order.
    pub fn add_batch(&mut self, scores: ArrayView2<'_, f64>, negatives: &HardNegativeAssignment, labels: &[u32]) {
        let n = scores.nrows();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    self.intra_sum += scores[[i, j]];
                    self.intra_pairs += 1;
                }
            }
        }
        for (i, &j) in negatives.text_for_image.iter().enumerate() {
            self.neg_sims.push(scores[[i, j]]);
            self.same_cluster += (labels[i] == labels[j]) as usize;
        }
        for (j, &i) in negatives.image_for_text.iter().enumerate() {
            self.neg_sims.push(scores[[i, j]]);
            self.same_cluster += (labels[i] == labels[j]) as usize;
        }
    }

    pub fn report(&self) -> HardnessReport {
        let count = self.neg_sims.len();
        if count == 0 {
            return HardnessReport::default();
        }
        let mut sorted = self.neg_sims.clone();
        sorted.sort_by(f64::total_cmp);
        // nearest-rank quantile
        let q = |p: f64| sorted[((p * count as f64).ceil() as usize).clamp(1, count) - 1];
        HardnessReport {
            negatives: count,
            mean_neg_sim: self.neg_sims.iter().sum::<f64>() / count as f64,
            q10: q(0.1),
            q50: q(0.5),
            q90: q(0.9),
            same_cluster_frac: self.same_cluster as f64 / count as f64,
            intra_batch_sim: if self.intra_pairs == 0 { 0.0 } else { self.intra_sum / self.intra_pairs as f64 },
        }
    }
}

/// Hardness of a schedule's batches given per-example features (indexed by
/// id) and one negative assignment per batch.
pub fn hardness_stats(
    schedule: &EpochSchedule,
    img: &EmbeddingTable,
    txt: &EmbeddingTable,
    assignments: &[HardNegativeAssignment],
    labels: &[u32],
) -> HardnessReport {
    let mut acc = HardnessAccumulator::default();
    for (batch, a) in schedule.batches.iter().zip(assignments) {
        let rows: Vec<usize> = batch.iter().map(|id| id.index()).collect();
        let scores = img.select(&rows).view().dot(&txt.select(&rows).view().t());
        let lab: Vec<u32> = rows.iter().map(|&r| labels[r]).collect();
        acc.add_batch(scores.view(), a, &lab);
    }
    acc.report()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UovPoint {
    pub mask_prob: f64,
    pub masked: usize,
    pub acc1: f64,
    pub acc5: f64,
    pub acc1_wo_image: f64,
    pub acc5_wo_image: f64,
    pub uov1: f64,
    pub uov5: f64,
    /// Digest of the mask grid shared by both passes.
    pub mask_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UovReport {
    pub points: Vec<UovPoint>,
}

impl UovReport {
    pub fn at(&self, mask_prob: f64) -> Option<&UovPoint> {
        self.points.iter().find(|p| p.mask_prob == mask_prob)
    }
}

fn topk_hits(logits: ArrayView2<'_, f64>, targets: &[u32]) -> (usize, usize) {
    let mut hits = (0, 0);
    for (row, &t) in logits.axis_iter(Axis(0)).zip(targets) {
        let s = row[t as usize];
        let rank = row.iter().filter(|&&v| v > s).count();
        hits.0 += (rank < 1) as usize;
        hits.1 += (rank < 5) as usize;
    }
    hits
}

fn mask_digest(mask: ArrayView2<'_, bool>) -> String {
    let mut h = Sha256::new();
    h.update((mask.nrows() as u64).to_le_bytes());
    h.update((mask.ncols() as u64).to_le_bytes());
    h.update(mask.iter().map(|&m| m as u8).collect::<Vec<u8>>());
    hex::encode(h.finalize())
}

/// Masked-token accuracy with and without the image pathway on a held-out
/// slice. Each grid point draws one mask (from substream `k` of `rng`)
/// and uses it for both passes. Masked positions become the mask token.
pub fn uov(
    model: &ToyModel,
    corpus: &SyntheticCorpus,
    ids: &[ExampleId],
    grid: &[f64],
    rng: &RngStream,
) -> Result<UovReport, EvalError> {
    if ids.is_empty() {
        return Err(EvalError::EmptySlice);
    }
    if let Some(id) = ids.iter().find(|id| id.index() < corpus.train_size()) {
        return Err(EvalError::NotHeldOut(*id));
    }
    let images = corpus.batch_images(ids);
    let tokens = corpus.batch_tokens(ids);
    let vocab = corpus.vocab;
    let mut points = Vec::with_capacity(grid.len());
    for (k, &p) in grid.iter().enumerate() {
        let scheme = MaskingScheme {
            mask_prob: p,
            mask_token: vocab.mask,
            first_regular: vocab.topic_base,
            vocab_size: vocab.size,
            corrupt: false,
        };
        let masked = mask_tokens(tokens.view(), &scheme, &mut rng.substream(k as u64));
        let targets = masked.targets();
        let sites: Vec<(usize, usize)> = targets.iter().map(|t| (t.0, t.1)).collect();
        let labels: Vec<u32> = targets.iter().map(|t| t.2).collect();
        let on = model.mlm_logits(images.view(), masked.tokens.view(), &sites, false);
        let off = model.mlm_logits(images.view(), masked.tokens.view(), &sites, true);
        let (h1, h5) = topk_hits(on.view(), &labels);
        let (w1, w5) = topk_hits(off.view(), &labels);
        let denom = labels.len().max(1) as f64;
        let (acc1, acc5) = (h1 as f64 / denom, h5 as f64 / denom);
        let (acc1_wo_image, acc5_wo_image) = (w1 as f64 / denom, w5 as f64 / denom);
        points.push(UovPoint {
            mask_prob: p,
            masked: labels.len(),
            acc1,
            acc5,
            acc1_wo_image,
            acc5_wo_image,
            uov1: acc1 - acc1_wo_image,
            uov5: acc5 - acc5_wo_image,
            mask_hash: mask_digest(masked.mask.view()),
        });
    }
    Ok(UovReport { points })
}

/// Best achievable top-1 accuracy from position alone, averaged over
/// positions: the expected accuracy of any predictor that sees neither
/// the image nor any unmasked token.
pub fn positional_chance(corpus: &SyntheticCorpus) -> f64 {
    let spec = &corpus.spec;
    let attr = spec.attribute_positions();
    let topic = spec.seq_len - attr;
    let per_attr = 1.0 / spec.n_attributes.max(1) as f64;
    let per_topic = 1.0 / (spec.n_clusters * spec.topic_tokens_per_cluster) as f64;
    (attr as f64 * per_attr + topic as f64 * per_topic) / spec.seq_len as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn identical_features_rank_by_index() {
        let t = EmbeddingTable::new(Array2::from_elem((4, 1), 1.0)).unwrap();
        let r = recall_at_k(&t, &t, &[1, 4]).unwrap();
        assert_eq!(r[0].i2t, 0.25);
        assert_eq!(r[1].i2t, 1.0);
        assert!(matches!(recall_at_k(&t, &t, &[5]), Err(EvalError::KTooLarge { k: 5, n: 4 })));
    }

    #[test]
    fn one_hot_pairs_are_perfect() {
        let eye = EmbeddingTable::new(Array2::eye(6)).unwrap();
        let r = recall_at_k(&eye, &eye, &[1]).unwrap();
        assert_eq!((r[0].i2t, r[0].t2i), (1.0, 1.0));
    }

    #[test]
    fn hardness_degenerate_cases() {
        let same = Array2::from_elem((3, 3), 1.0);
        let a = HardNegativeAssignment { text_for_image: vec![1, 2, 0], image_for_text: vec![2, 0, 1], degenerate_rows: 0 };
        let mut acc = HardnessAccumulator::default();
        acc.add_batch(same.view(), &a, &[0, 0, 1]);
        let r = acc.report();
        assert_eq!(r.mean_neg_sim, 1.0);
        assert_eq!(r.negatives, 6);
        assert!((r.same_cluster_frac - 2.0 / 6.0).abs() < 1e-12);

        let mut acc = HardnessAccumulator::default();
        acc.add_batch(Array2::<f64>::eye(3).view(), &a, &[0, 1, 2]);
        assert_eq!(acc.report().intra_batch_sim, 0.0);
    }

    #[test]
    fn quantiles_are_monotone() {
        let s = array![[0.0, 0.1, 0.9], [0.4, 0.0, -0.2], [0.3, 0.7, 0.0]];
        let a = HardNegativeAssignment { text_for_image: vec![1, 2, 0], image_for_text: vec![2, 2, 1], degenerate_rows: 0 };
        let mut acc = HardnessAccumulator::default();
        acc.add_batch(s.view(), &a, &[0, 1, 2]);
        let r = acc.report();
        assert!(r.q10 <= r.q50 && r.q50 <= r.q90);
    }
}
