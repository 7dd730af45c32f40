use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::rng::{derive_stream, RngStream, StreamLabel};
use crate::types::ExampleId;

/// Generator parameters for the clustered image/text corpus.
///
/// Every example belongs to one of `n_clusters` clusters. Its text holds
/// `seq_len` tokens: the first `attribute_positions()` slots carry an
/// attribute token drawn uniformly from a vocabulary shared by all clusters
/// (so text context cannot recover it), the rest are drawn uniformly from
/// the cluster's own topic tokens. The image vector is
/// `centroid + noise · (signature(tokens) + signature_noise · ε)`, where
/// the signature is a fixed random linear map of the token counts. Images
/// therefore identify their own caption, and attribute tokens are
/// predictable from the image alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_clusters: usize,
    pub dataset_size: usize,
    #[serde(default)]
    pub eval_size: usize,
    pub image_dim: usize,
    pub seq_len: usize,
    pub topic_tokens_per_cluster: usize,
    pub n_attributes: usize,
    pub attribute_fraction: f64,
    pub noise: f64,
    pub signature_noise: f64,
    pub centroid_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_clusters: 32,
            dataset_size: 4096,
            eval_size: 512,
            image_dim: 64,
            seq_len: 8,
            topic_tokens_per_cluster: 4,
            n_attributes: 16,
            attribute_fraction: 0.125,
            noise: 0.5,
            signature_noise: 0.3,
            centroid_scale: 1.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn attribute_positions(&self) -> usize {
        (self.attribute_fraction * self.seq_len as f64).round() as usize
    }

    pub fn total(&self) -> usize {
        self.dataset_size + self.eval_size
    }

    pub fn vocab(&self) -> Vocab {
        let topic_base = 1;
        let attribute_base = topic_base + (self.n_clusters * self.topic_tokens_per_cluster) as u32;
        Vocab {
            mask: 0,
            topic_base,
            attribute_base,
            size: attribute_base + self.n_attributes as u32,
        }
    }

    fn check(&self) -> Result<(), ToyError> {
        let bad = |m: String| Err(ToyError::SpecInfeasible(m));
        if self.n_clusters < 2 {
            return bad(format!("need at least 2 clusters, got {}", self.n_clusters));
        }
        if self.dataset_size < 4 * self.n_clusters {
            return bad(format!(
                "dataset_size {} < 4 x {} clusters",
                self.dataset_size, self.n_clusters
            ));
        }
        if self.image_dim == 0 || self.seq_len == 0 || self.topic_tokens_per_cluster == 0 {
            return bad("image_dim, seq_len and topic_tokens_per_cluster must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.attribute_fraction) {
            return bad(format!("attribute_fraction {} outside [0, 1]", self.attribute_fraction));
        }
        if self.attribute_positions() > 0 && self.n_attributes == 0 {
            return bad("attribute positions requested without attribute tokens".into());
        }
        for (name, v) in [
            ("noise", self.noise),
            ("signature_noise", self.signature_noise),
            ("centroid_scale", self.centroid_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.total() > u32::MAX as usize {
            return bad("corpus too large for 32-bit ids".into());
        }
        Ok(())
    }
}

/// Token id layout: `[mask | topic tokens by cluster | attribute tokens]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub mask: u32,
    pub topic_base: u32,
    pub attribute_base: u32,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub vocab: Vocab,
    pub centroids: Array2<f64>,
    /// `total × image_dim`; rows `0..dataset_size` are training examples,
    /// the rest form the held-out evaluation slice.
    pub images: Array2<f64>,
    pub tokens: Array2<u32>,
    pub labels: Vec<u32>,
}

impl SyntheticCorpus {
    /// Generates from `spec.seed`.
    pub fn from_spec(spec: &CorpusSpec) -> Result<Self, ToyError> {
        generate_corpus(spec, &mut derive_stream(spec.seed, StreamLabel::DataGen))
    }

    pub fn train_size(&self) -> usize {
        self.spec.dataset_size
    }

    pub fn total(&self) -> usize {
        self.labels.len()
    }

    pub fn eval_ids(&self) -> Vec<ExampleId> {
        (self.spec.dataset_size..self.total()).map(ExampleId::from).collect()
    }

    pub fn label(&self, id: ExampleId) -> u32 {
        self.labels[id.index()]
    }

    pub fn batch_images(&self, ids: &[ExampleId]) -> Array2<f64> {
        let idx: Vec<usize> = ids.iter().map(|i| i.index()).collect();
        self.images.select(Axis(0), &idx)
    }

    pub fn batch_tokens(&self, ids: &[ExampleId]) -> Array2<u32> {
        let idx: Vec<usize> = ids.iter().map(|i| i.index()).collect();
        self.tokens.select(Axis(0), &idx)
    }

    /// Smallest distance between two centroids divided by `noise`.
    pub fn separation_ratio(&self) -> f64 {
        min_pairwise_distance(&self.centroids) / self.spec.noise
    }
}

fn min_pairwise_distance(points: &Array2<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.nrows() {
        for j in i + 1..points.nrows() {
            let d = &points.row(i) - &points.row(j);
            best = best.min(d.dot(&d).sqrt());
        }
    }
    best
}

/// Minimum centroid separation, in units of `noise`.
pub const MIN_SEPARATION: f64 = 4.0;

pub fn generate_corpus(spec: &CorpusSpec, rng: &mut RngStream) -> Result<SyntheticCorpus, ToyError> {
    spec.check()?;
    let vocab = spec.vocab();
    let k = spec.n_clusters;
    let dim = spec.image_dim;
    let total = spec.total();
    let attr_slots = spec.attribute_positions();

    let gauss = |rows: usize, cols: usize, rng: &mut RngStream| {
        Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
    };
    let centroids = gauss(k, dim, rng) * spec.centroid_scale;
    if spec.noise > 0.0 {
        let ratio = min_pairwise_distance(&centroids) / spec.noise;
        if ratio < MIN_SEPARATION {
            return Err(ToyError::SpecInfeasible(format!(
                "centroid separation {ratio:.3} noise units is below {MIN_SEPARATION}"
            )));
        }
    }
    let signature = gauss(dim, vocab.size as usize, rng);

    let mut labels: Vec<u32> = (0..total).map(|i| (i % k) as u32).collect();
    labels[..spec.dataset_size].shuffle(rng);
    labels[spec.dataset_size..].shuffle(rng);

    let mut tokens = Array2::zeros((total, spec.seq_len));
    let mut images = Array2::zeros((total, dim));
    let scale = 1.0 / (spec.seq_len as f64).sqrt();
    for i in 0..total {
        let c = labels[i] as usize;
        let mut counts = Array1::<f64>::zeros(vocab.size as usize);
        for s in 0..spec.seq_len {
            let tok = if s < attr_slots {
                vocab.attribute_base + rng.random_range(0..spec.n_attributes) as u32
            } else {
                let first = vocab.topic_base + (c * spec.topic_tokens_per_cluster) as u32;
                first + rng.random_range(0..spec.topic_tokens_per_cluster) as u32
            };
            tokens[[i, s]] = tok;
            counts[tok as usize] += scale;
        }
        let sig = signature.dot(&counts);
        let mut row = images.row_mut(i);
        for d in 0..dim {
            let eps: f64 = rng.sample(StandardNormal);
            row[d] = centroids[[c, d]] + spec.noise * (sig[d] + spec.signature_noise * eps);
        }
    }

    Ok(SyntheticCorpus { spec: spec.clone(), vocab, centroids, images, tokens, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_clusters() {
        let c = SyntheticCorpus::from_spec(&CorpusSpec { eval_size: 0, noise: 0.1, ..Default::default() })
            .unwrap();
        let mut counts = [0; 32];
        for l in &c.labels {
            counts[*l as usize] += 1;
        }
        assert!(counts.iter().all(|&n| n == 128));
    }

    #[test]
    fn zero_noise_collapses_clusters() {
        let c = SyntheticCorpus::from_spec(&CorpusSpec { noise: 0.0, ..Default::default() }).unwrap();
        for i in 0..c.total() {
            let centroid = c.centroids.row(c.labels[i] as usize);
            assert_eq!(c.images.row(i), centroid);
        }
    }

    #[test]
    fn centroids_are_separated() {
        let c = SyntheticCorpus::from_spec(&CorpusSpec::default()).unwrap();
        assert!(c.separation_ratio() >= MIN_SEPARATION);
        let tight = CorpusSpec { centroid_scale: 0.01, ..Default::default() };
        assert!(matches!(SyntheticCorpus::from_spec(&tight), Err(ToyError::SpecInfeasible(_))));
    }

    #[test]
    fn tokens_follow_layout() {
        let c = SyntheticCorpus::from_spec(&CorpusSpec::default()).unwrap();
        let v = c.vocab;
        assert_eq!(v.size, 1 + 32 * 4 + 16);
        for i in 0..c.total() {
            let label = c.labels[i];
            assert!(c.tokens[[i, 0]] >= v.attribute_base);
            for s in 1..8 {
                let t = c.tokens[[i, s]];
                assert_eq!((t - v.topic_base) / 4, label);
            }
        }
    }

    #[test]
    fn infeasible_specs() {
        let few = CorpusSpec { dataset_size: 100, ..Default::default() };
        assert!(matches!(SyntheticCorpus::from_spec(&few), Err(ToyError::SpecInfeasible(_))));
        let one = CorpusSpec { n_clusters: 1, ..Default::default() };
        assert!(matches!(SyntheticCorpus::from_spec(&one), Err(ToyError::SpecInfeasible(_))));
    }
}
