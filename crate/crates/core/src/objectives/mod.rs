//! Training objectives: in-batch contrastive loss with its consistency
//! regulariser, matching loss over hard negatives, masked-token loss, and
//! their sum. All reductions are means over the batch.

mod contrastive;
mod masking;
mod matching;
mod negatives;
mod queue;

pub use contrastive::{
    consistency_loss, consistency_loss_with_targets, itc_from_scores, itc_loss, logit_grads_to_scores,
    ConsistencyOutput, ItcOutput,
};
pub use masking::{mask_tokens, mlm_loss, MaskedBatch, MaskingScheme, MlmOutput};
pub use matching::{itm_loss, ItmOutput};
pub use negatives::{
    negative_weights, select_hard_negatives, HardNegativeAssignment, NegativeSampling,
};
pub use queue::{itc_loss_with_queue, queue_extended_distributions, FeatureQueue, QueueItcOutput};

use thiserror::Error;

use crate::similarity::SimilarityError;

/// Off-diagonal mass below which a negative-sampling row falls back to uniform.
pub const DEGENERATE_MASS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("need at least {need} aligned pairs, got {got}")]
    BatchTooSmall { need: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {row} of the {which} distribution sums to {sum}")]
    RowNotNormalized { which: &'static str, row: usize, sum: f64 },
    #[error("target token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
}

/// One scalar loss term with the gradient of that term (flattened, any layout).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Component {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// The four heads computed on the same batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossComponents {
    pub itc: Component,
    pub cons: Component,
    pub itm: Component,
    pub mlm: Component,
}

/// Scalar losses and the gradient of their weighted sum.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBundle {
    pub itc: f64,
    pub cons: f64,
    pub itm: f64,
    pub mlm: f64,
    pub total: f64,
    pub grads: Vec<f64>,
}

impl LossBundle {
    /// Scalars only; `grads` is filled in by the caller.
    pub fn from_values(itc: f64, cons: f64, itm: f64, mlm: f64, lambda_cons: f64) -> Self {
        Self { itc, cons, itm, mlm, total: itm + mlm + (itc + lambda_cons * cons), grads: Vec::new() }
    }
}

/// `L = L_itm + L_mlm + (L_itc + λ_cons · L_cons)`, gradients summed likewise.
pub fn total_loss(parts: LossComponents, lambda_cons: f64) -> LossBundle {
    let len = [&parts.itc, &parts.cons, &parts.itm, &parts.mlm]
        .iter()
        .map(|c| c.grad.len())
        .max()
        .unwrap_or(0);
    let mut grads = vec![0.0; len];
    for (c, w) in [(&parts.itc, 1.0), (&parts.cons, lambda_cons), (&parts.itm, 1.0), (&parts.mlm, 1.0)] {
        for (g, v) in grads.iter_mut().zip(&c.grad) {
            *g += w * v;
        }
    }
    LossBundle {
        grads,
        ..LossBundle::from_values(
            parts.itc.value,
            parts.cons.value,
            parts.itm.value,
            parts.mlm.value,
            lambda_cons,
        )
    }
}
