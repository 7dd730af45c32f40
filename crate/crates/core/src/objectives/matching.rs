use ndarray::{Array2, ArrayView2, Axis};

use super::ObjectiveError;

/// Column of the "matched" class in a 2-way logit row.
pub const MATCH: usize = 1;

#[derive(Debug, Clone)]
pub struct ItmOutput {
    pub loss: f64,
    pub grad_pos: Array2<f64>,
    pub grad_neg: Array2<f64>,
}

/// Mean 2-way cross-entropy over all candidates; positives are labelled
/// matched, negatives unmatched, every candidate weighted equally.
pub fn itm_loss(
    positive_logits: ArrayView2<'_, f64>,
    negative_logits: ArrayView2<'_, f64>,
) -> Result<ItmOutput, ObjectiveError> {
    if positive_logits.ncols() != 2 || negative_logits.ncols() != 2 {
        return Err(ObjectiveError::Shape("matching logits must have two columns".into()));
    }
    let total = positive_logits.nrows() + negative_logits.nrows();
    if total == 0 {
        return Err(ObjectiveError::BatchTooSmall { need: 1, got: 0 });
    }
    let inv = 1.0 / total as f64;
    let mut loss = 0.0;
    let mut head = |logits: ArrayView2<'_, f64>, label: usize| {
        let mut grad = Array2::zeros(logits.raw_dim());
        for (r, row) in logits.axis_iter(Axis(0)).enumerate() {
            let max = row[0].max(row[1]);
            let e0 = (row[0] - max).exp();
            let e1 = (row[1] - max).exp();
            let lse = (e0 + e1).ln();
            loss += lse - (row[label] - max);
            let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
            for c in 0..2 {
                grad[[r, c]] = inv * (p[c] - if c == label { 1.0 } else { 0.0 });
            }
        }
        grad
    };
    let grad_pos = head(positive_logits, MATCH);
    let grad_neg = head(negative_logits, 1 - MATCH);
    Ok(ItmOutput { loss: loss * inv, grad_pos, grad_neg })
}
