use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::ObjectiveError;
use crate::rng::RngStream;

/// Masking parameters. The `corrupt` flag enables the 80/10/10 split
/// (mask token / random token / unchanged); without it every selected
/// position becomes the mask token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingScheme {
    pub mask_prob: f64,
    pub mask_token: u32,
    /// Random replacement tokens are drawn uniformly from `first_regular..vocab_size`.
    pub first_regular: u32,
    pub vocab_size: u32,
    pub corrupt: bool,
}

/// A token grid after masking, with the original grid kept for targets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskedBatch {
    pub tokens: Array2<u32>,
    pub mask: Array2<bool>,
    pub original: Array2<u32>,
}

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// `(row, position, original token)` for every masked position, row-major.
    pub fn targets(&self) -> Vec<(usize, usize, u32)> {
        self.mask
            .indexed_iter()
            .filter(|(_, m)| **m)
            .map(|((r, c), _)| (r, c, self.original[[r, c]]))
            .collect()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.num_masked() as f64 / self.mask.len().max(1) as f64
    }
}

/// Independently selects each position with probability `mask_prob`.
///
/// Draws happen in row-major order, one uniform per position and one more
/// per selected position when corruption is on.
pub fn mask_tokens(tokens: ArrayView2<'_, u32>, scheme: &MaskingScheme, rng: &mut RngStream) -> MaskedBatch {
    let mut out = tokens.to_owned();
    let mut mask = Array2::from_elem(tokens.raw_dim(), false);
    for ((r, c), tok) in out.indexed_iter_mut() {
        if rng.random::<f64>() >= scheme.mask_prob {
            continue;
        }
        mask[[r, c]] = true;
        if !scheme.corrupt {
            *tok = scheme.mask_token;
            continue;
        }
        let u = rng.random::<f64>();
        if u < 0.8 {
            *tok = scheme.mask_token;
        } else if u < 0.9 {
            *tok = rng.random_range(scheme.first_regular..scheme.vocab_size);
        }
    }
    MaskedBatch { tokens: out, mask, original: tokens.to_owned() }
}

#[derive(Debug, Clone)]
pub struct MlmOutput {
    pub loss: f64,
    pub grad_logits: Array2<f64>,
}

/// Mean cross-entropy of `logits` (one row per masked position) against
/// `targets`. No masked positions yields zero loss and an empty gradient.
pub fn mlm_loss(logits: ArrayView2<'_, f64>, targets: &[u32]) -> Result<MlmOutput, ObjectiveError> {
    if logits.nrows() != targets.len() {
        return Err(ObjectiveError::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    if targets.is_empty() {
        return Ok(MlmOutput { loss: 0.0, grad_logits: grad });
    }
    let vocab = logits.ncols();
    let inv = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    for ((row, mut g), &t) in logits.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).zip(targets) {
        let t = t as usize;
        if t >= vocab {
            return Err(ObjectiveError::TokenOutOfRange { token: t as u32, vocab });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (gv, &x) in g.iter_mut().zip(row.iter()) {
            *gv = (x - max).exp();
            sum += *gv;
        }
        loss += sum.ln() - (row[t] - max);
        g.mapv_inplace(|e| inv * e / sum);
        g[t] -= inv;
    }
    Ok(MlmOutput { loss: loss * inv, grad_logits: grad })
}
