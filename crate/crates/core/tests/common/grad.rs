//! Finite-difference gradient instances. Each returns the norm-wise
//! relative error between the analytic gradient and central differences
//! of an independent oracle (or of the model's own forward pass for the
//! parameter-level checks).

use grit_core::objectives::{
    consistency_loss, consistency_loss_with_targets, itc_from_scores, itc_loss, itm_loss, mask_tokens, mlm_loss,
    HardNegativeAssignment, MaskingScheme, NegativeSampling,
};
use grit_core::similarity::{Direction, DistributionMatrix};
use grit_core::toymodel::{BatchData, LossSettings, LossWeights, ModelDims, NegativeSource, ToyModel};
use grit_core::{derive_stream, StreamLabel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    central_diff, consistency_oracle, distributions, gaussian, itc_oracle, itm_oracle, mlm_oracle, rel_err,
    unit_rows, FD_STEP,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn shaped(x: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), x.to_vec()).unwrap()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Contrastive loss: value against the oracle, dL/dS and dL/d(features).
pub fn itc(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=8);
    let d = r.random_range(2..=6);
    let tau = r.random_range(0.05..1.0);
    let s = Array2::from_shape_simple_fn((n, n), || r.random_range(-1.0..1.0));
    let (loss, _, _, gs) = itc_from_scores(s.view(), tau).unwrap();
    assert!((loss - itc_oracle(&s, tau)).abs() < 1e-10, "itc value");
    let fd = central_diff(|x| itc_oracle(&shaped(x, n, n), tau), &flat(&s), FD_STEP, &all(n * n));
    let e1 = rel_err(&flat(&gs), &fd);

    let img = unit_rows(&mut r, n, d);
    let txt = unit_rows(&mut r, n, d);
    let out = itc_loss(img.view(), txt.view(), tau).unwrap();
    let fi = central_diff(|x| itc_oracle(&shaped(x, n, d).dot(&txt.t()), tau), &flat(&img), FD_STEP, &all(n * d));
    let ft = central_diff(|x| itc_oracle(&img.dot(&shaped(x, n, d).t()), tau), &flat(&txt), FD_STEP, &all(n * d));
    e1.max(rel_err(&flat(&out.grad_img), &fi)).max(rel_err(&flat(&out.grad_txt), &ft))
}

fn dist(dir: Direction, a: Array2<f64>) -> DistributionMatrix {
    DistributionMatrix::new(dir, a).unwrap()
}

/// Consistency term w.r.t. the prediction logits, targets held fixed.
pub fn consistency(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=7);
    let scale = r.random_range(0.5..3.0);
    let a = gaussian(&mut r, n, n) * scale;
    let b = gaussian(&mut r, n, n) * scale;
    let qs = gaussian(&mut r, n, n) * scale;
    let q = distributions(&qs, 1.0);
    let row_softmax = |x: &Array2<f64>| distributions(x, 1.0).0;
    let p = (row_softmax(&a), row_softmax(&b));
    let out = consistency_loss_with_targets(
        (&dist(Direction::V2T, q.0.clone()), &dist(Direction::T2V, q.1.clone())),
        (&dist(Direction::V2T, p.0.clone()), &dist(Direction::T2V, p.1.clone())),
    )
    .unwrap();
    assert!((out.loss - consistency_oracle(&q, &p)).abs() < 1e-10, "consistency value");
    let fa = central_diff(|x| consistency_oracle(&q, &(row_softmax(&shaped(x, n, n)), p.1.clone())), &flat(&a), FD_STEP, &all(n * n));
    let fb = central_diff(|x| consistency_oracle(&q, &(p.0.clone(), row_softmax(&shaped(x, n, n)))), &flat(&b), FD_STEP, &all(n * n));
    rel_err(&flat(&out.grad_logits_v2t), &fa).max(rel_err(&flat(&out.grad_logits_t2v), &fb))
}

pub fn itm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = r.random_range(1..=6);
    let q = r.random_range(1..=12);
    let scale = r.random_range(0.5..4.0);
    let pos = gaussian(&mut r, p, 2) * scale;
    let neg = gaussian(&mut r, q, 2) * scale;
    let out = itm_loss(pos.view(), neg.view()).unwrap();
    assert!((out.loss - itm_oracle(&pos, &neg)).abs() < 1e-10, "itm value");
    let fp = central_diff(|x| itm_oracle(&shaped(x, p, 2), &neg), &flat(&pos), FD_STEP, &all(2 * p));
    let fneg = central_diff(|x| itm_oracle(&pos, &shaped(x, q, 2)), &flat(&neg), FD_STEP, &all(2 * q));
    rel_err(&flat(&out.grad_pos), &fp).max(rel_err(&flat(&out.grad_neg), &fneg))
}

pub fn mlm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let rows = r.random_range(1..=10);
    let v = r.random_range(3..=24);
    let logits = gaussian(&mut r, rows, v) * r.random_range(0.5..3.0);
    let targets: Vec<u32> = (0..rows).map(|_| r.random_range(0..v as u32)).collect();
    let out = mlm_loss(logits.view(), &targets).unwrap();
    assert!((out.loss - mlm_oracle(&logits, &targets)).abs() < 1e-10, "mlm value");
    let fd = central_diff(|x| mlm_oracle(&shaped(x, rows, v), &targets), &flat(&logits), FD_STEP, &all(rows * v));
    rel_err(&flat(&out.grad_logits), &fd)
}

/// A small model with every parameter (biases included) perturbed away
/// from its initial value, plus one masked batch.
pub struct ModelCase {
    pub model: ToyModel,
    pub batch: BatchData,
    pub tau: f64,
    pub lambda: f64,
}

pub fn model_case(seed: u64) -> ModelCase {
    let mut r = rng(seed);
    let dims = ModelDims {
        image_dim: r.random_range(2..=6),
        hidden: r.random_range(2..=5),
        embed_dim: r.random_range(2..=4),
        fusion_hidden: r.random_range(2..=4),
        vocab_size: r.random_range(4..=9),
        seq_len: r.random_range(2..=4),
    };
    let base = ToyModel::new(dims, &mut derive_stream(seed, StreamLabel::WeightInit));
    let params: Vec<f64> = base.params().iter().map(|p| p + 0.3 * r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let model = ToyModel::from_params(dims, params).unwrap();
    let n = r.random_range(2..=5);
    let images = gaussian(&mut r, n, dims.image_dim);
    let tokens = Array2::from_shape_simple_fn((n, dims.seq_len), || r.random_range(1..dims.vocab_size as u32));
    let scheme = MaskingScheme {
        mask_prob: 0.5,
        mask_token: 0,
        first_regular: 1,
        vocab_size: dims.vocab_size as u32,
        corrupt: true,
    };
    let mut masked = mask_tokens(tokens.view(), &scheme, &mut derive_stream(seed, StreamLabel::Masking));
    if masked.num_masked() == 0 {
        masked.mask[[0, 0]] = true;
        masked.tokens[[0, 0]] = 0;
    }
    let tau = r.random_range(0.1..1.0);
    let lambda = r.random_range(0.1..1.0);
    ModelCase { model, batch: BatchData { images, tokens, masked }, tau, lambda }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Head {
    Itc,
    Cons,
    Itm,
    Mlm,
    Total,
}

impl ModelCase {
    fn settings<'a>(&self, weights: LossWeights, targets: Option<&'a (DistributionMatrix, DistributionMatrix)>) -> LossSettings<'a> {
        LossSettings {
            tau: self.tau,
            lambda_cons: self.lambda,
            weights,
            negatives: NegativeSampling::Multinomial,
            queue: None,
            targets,
        }
    }

    /// Negatives and consistency targets from one forward pass, then frozen.
    pub fn freeze(&self, seed: u64) -> (HardNegativeAssignment, (DistributionMatrix, DistributionMatrix)) {
        let mut neg = derive_stream(seed, StreamLabel::NegativeSampling);
        let out = self
            .model
            .loss_and_grad(&self.batch, &self.settings(LossWeights::default(), None), NegativeSource::Sample(&mut neg))
            .unwrap();
        (out.negatives, out.distributions)
    }

    pub fn grads(
        &self,
        model: &ToyModel,
        weights: LossWeights,
        neg: &HardNegativeAssignment,
        targets: Option<&(DistributionMatrix, DistributionMatrix)>,
    ) -> grit_core::objectives::LossBundle {
        model.loss_and_grad(&self.batch, &self.settings(weights, targets), NegativeSource::Fixed(neg)).unwrap().bundle
    }
}

/// Parameter gradient of one head (or the total) against central
/// differences of the forward pass with negatives and targets frozen.
pub fn model_head(seed: u64, head: Head) -> f64 {
    let case = model_case(seed);
    let (neg, targets) = case.freeze(seed);
    let weights = match head {
        Head::Total => LossWeights::default(),
        Head::Itc => LossWeights { itc: 1.0, cons: 0.0, itm: 0.0, mlm: 0.0 },
        Head::Cons => LossWeights { itc: 0.0, cons: 1.0, itm: 0.0, mlm: 0.0 },
        Head::Itm => LossWeights { itc: 0.0, cons: 0.0, itm: 1.0, mlm: 0.0 },
        Head::Mlm => LossWeights { itc: 0.0, cons: 0.0, itm: 0.0, mlm: 1.0 },
    };
    let pick = |b: &grit_core::objectives::LossBundle| match head {
        Head::Total => b.total,
        Head::Itc => b.itc,
        Head::Cons => case.lambda * b.cons,
        Head::Itm => b.itm,
        Head::Mlm => b.mlm,
    };
    let analytic = case.grads(&case.model, weights, &neg, Some(&targets)).grads;
    let dims = case.model.dims();
    let fd = central_diff(
        |x| pick(&case.grads(&ToyModel::from_params(dims, x.to_vec()).unwrap(), weights, &neg, Some(&targets))),
        case.model.params(),
        FD_STEP,
        &all(case.model.num_params()),
    );
    rel_err(&analytic, &fd)
}

/// Gradient through detached targets: the optimiser gradient with the
/// batch's own (detached) targets must be bitwise identical to the one
/// computed with the same values supplied as external constants, both at
/// the objective level and through the model. Returns the largest
/// absolute difference found (expected exactly 0).
pub fn detached_target_difference(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=7);
    let s = Array2::from_shape_simple_fn((n, n), || r.random_range(-1.0..1.0));
    let (_, p, q, _) = itc_from_scores(s.view(), r.random_range(0.05..1.0)).unwrap();
    let own = consistency_loss(&p, &q).unwrap();
    let ext = consistency_loss_with_targets((&p.clone(), &q.clone()), (&p, &q)).unwrap();
    let mut worst = own
        .grad_logits_v2t
        .iter()
        .chain(own.grad_logits_t2v.iter())
        .zip(ext.grad_logits_v2t.iter().chain(ext.grad_logits_t2v.iter()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let case = model_case(seed);
    let (neg, targets) = case.freeze(seed);
    let w = LossWeights::default();
    let live = case.grads(&case.model, w, &neg, None).grads;
    let frozen = case.grads(&case.model, w, &neg, Some(&targets)).grads;
    worst = live.iter().zip(&frozen).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    worst
}

/// Relative error of the analytic gradient against differences that let
/// the targets move with the parameters. A stop-gradient implementation
/// has to disagree here.
pub fn live_target_error(seed: u64) -> f64 {
    let case = model_case(seed);
    let (neg, _) = case.freeze(seed);
    let w = LossWeights { itc: 0.0, cons: 1.0, itm: 0.0, mlm: 0.0 };
    let analytic = case.grads(&case.model, w, &neg, None).grads;
    let dims = case.model.dims();
    let fd = central_diff(
        |x| case.lambda * case.grads(&ToyModel::from_params(dims, x.to_vec()).unwrap(), w, &neg, None).cons,
        case.model.params(),
        FD_STEP,
        &all(case.model.num_params()),
    );
    rel_err(&analytic, &fd)
}
