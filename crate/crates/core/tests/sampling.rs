mod common;

use common::chi_square;
use grit_core::objectives::{negative_weights, select_hard_negatives, NegativeSampling};
use grit_core::similarity::{Direction, DistributionMatrix};
use grit_core::{derive_stream, StreamLabel};
use ndarray::Array2;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn dists(n: usize) -> (DistributionMatrix, DistributionMatrix) {
    let s = Array2::from_shape_fn((n, n), |(i, j)| ((i * 5 + j * 3) as f64).sin());
    let (v2t, t2v) = common::distributions(&s, 0.3);
    (DistributionMatrix::new(Direction::V2T, v2t).unwrap(), DistributionMatrix::new(Direction::T2V, t2v).unwrap())
}

#[test]
fn multinomial_draws_follow_renormalised_rows() {
    let n = 6;
    let (p, q) = dists(n);
    let mut rng = derive_stream(5, StreamLabel::NegativeSampling);
    let mut counts = vec![vec![0u64; n]; n];
    for _ in 0..20_000 {
        let a = select_hard_negatives(&p, &q, NegativeSampling::Multinomial, &mut rng).unwrap();
        for (i, &j) in a.text_for_image.iter().enumerate() {
            counts[i][j] += 1;
        }
    }
    for (i, c) in counts.iter().enumerate() {
        assert_eq!(c[i], 0);
        let probs: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { p.row(i)[j] / (1.0 - p.row(i)[i]) }).collect();
        let stat = chi_square(c, &probs);
        let pval = 1.0 - ChiSquared::new((n - 2) as f64).unwrap().cdf(stat);
        assert!(pval > 1e-4, "row {i}: chi2 {stat}, p {pval}");
    }
}

#[test]
fn weights_drop_the_own_index() {
    let (p, _) = dists(5);
    for i in 0..5 {
        let (w, fallback) = negative_weights(p.row(i), i);
        assert!(!fallback);
        assert_eq!(w[i], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn uniform_mode_never_returns_the_positive() {
    let (p, q) = dists(7);
    let mut rng = derive_stream(6, StreamLabel::NegativeSampling);
    for _ in 0..2000 {
        let a = select_hard_negatives(&p, &q, NegativeSampling::Uniform, &mut rng).unwrap();
        assert!(a.text_for_image.iter().enumerate().all(|(i, &j)| i != j));
        assert!(a.image_for_text.iter().enumerate().all(|(j, &i)| i != j));
    }
}
