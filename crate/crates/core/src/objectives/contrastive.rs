use ndarray::{Array2, ArrayView2, Axis};

use super::ObjectiveError;
use crate::similarity::{softmax_rows, Direction, DistributionMatrix, SimilarityError, ROW_SUM_TOL};

#[derive(Debug, Clone)]
pub struct ItcOutput {
    pub loss: f64,
    pub p_v2t: DistributionMatrix,
    pub p_t2v: DistributionMatrix,
    /// dL/dS for the `N×N` score matrix.
    pub grad_scores: Array2<f64>,
    pub grad_img: Array2<f64>,
    pub grad_txt: Array2<f64>,
}

/// In-batch contrastive loss with the diagonal as ground truth.
///
/// Rows of `img` and `txt` are treated as free variables: the gradient does
/// not project onto the unit sphere.
pub fn itc_loss(
    img: ArrayView2<'_, f64>,
    txt: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<ItcOutput, ObjectiveError> {
    if img.ncols() != txt.ncols() {
        return Err(SimilarityError::DimMismatch { img: img.ncols(), txt: txt.ncols() }.into());
    }
    if img.nrows() != txt.nrows() {
        return Err(ObjectiveError::Shape(format!(
            "{} images vs {} texts",
            img.nrows(),
            txt.nrows()
        )));
    }
    let scores = img.dot(&txt.t());
    let (loss, p_v2t, p_t2v, grad_scores) = itc_from_scores(scores.view(), tau)?;
    let grad_img = grad_scores.dot(&txt);
    let grad_txt = grad_scores.t().dot(&img);
    Ok(ItcOutput { loss, p_v2t, p_t2v, grad_scores, grad_img, grad_txt })
}

/// Loss, both distributions and dL/dS directly from a square score matrix.
pub fn itc_from_scores(
    scores: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<(f64, DistributionMatrix, DistributionMatrix, Array2<f64>), ObjectiveError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(SimilarityError::NonPositiveTemperature(tau).into());
    }
    let n = scores.nrows();
    if scores.ncols() != n {
        return Err(ObjectiveError::Shape(format!("score matrix {}x{} is not square", n, scores.ncols())));
    }
    if n < 2 {
        return Err(ObjectiveError::BatchTooSmall { need: 2, got: n });
    }
    let nll = |logits: ArrayView2<'_, f64>| -> f64 {
        logits
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(i, row)| {
                let (arg, max) = row
                    .iter()
                    .cloned()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, x)| if x > b.1 { (j, x) } else { b });
                // ln(1 + Σ_{j≠arg} e^{..}) keeps tiny losses representable
                let rest: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != arg)
                    .map(|(_, x)| ((x - max) / tau).exp())
                    .sum();
                rest.ln_1p() - (row[i] - max) / tau
            })
            .sum()
    };
    let loss = (nll(scores) + nll(scores.t())) / (2.0 * n as f64);

    let p_v2t = softmax_rows(scores, tau);
    let p_t2v = softmax_rows(scores.t(), tau);
    let scale = 1.0 / (2.0 * n as f64 * tau);
    let mut grad = &p_v2t + &p_t2v.t();
    for i in 0..n {
        grad[[i, i]] -= 2.0;
    }
    grad *= scale;

    Ok((
        loss,
        DistributionMatrix::new(Direction::V2T, p_v2t).expect("softmax rows are normalised"),
        DistributionMatrix::new(Direction::T2V, p_t2v).expect("softmax rows are normalised"),
        grad,
    ))
}

#[derive(Debug, Clone)]
pub struct ConsistencyOutput {
    pub loss: f64,
    /// Gradient w.r.t. the logits behind the (non-detached) v2t predictions.
    pub grad_logits_v2t: Array2<f64>,
    /// Gradient w.r.t. the logits behind the (non-detached) t2v predictions.
    pub grad_logits_t2v: Array2<f64>,
}

/// Consistency term with stop-gradient pseudo-targets taken from the inputs
/// themselves.
pub fn consistency_loss(
    p_v2t: &DistributionMatrix,
    p_t2v: &DistributionMatrix,
) -> Result<ConsistencyOutput, ObjectiveError> {
    consistency_loss_with_targets((p_v2t, p_t2v), (p_v2t, p_t2v))
}

/// `½ · mean_i [ KL(q^{v2t}_i ‖ p^{t2v}_i) + KL(q^{t2v}_i ‖ p^{v2t}_i) ]`.
///
/// `targets` are constants: no gradient flows into them. Predictions are
/// assumed to be softmaxes of logits, so the returned gradients are w.r.t.
/// those logits.
pub fn consistency_loss_with_targets(
    targets: (&DistributionMatrix, &DistributionMatrix),
    preds: (&DistributionMatrix, &DistributionMatrix),
) -> Result<ConsistencyOutput, ObjectiveError> {
    let (q_v2t, q_t2v) = targets;
    let (p_v2t, p_t2v) = preds;
    let n = p_v2t.rows();
    for (m, _) in [(q_v2t, "q_v2t"), (q_t2v, "q_t2v"), (p_t2v, "p_t2v")] {
        if m.rows() != n || m.cols() != p_v2t.cols() {
            return Err(ObjectiveError::Shape("consistency inputs differ in shape".into()));
        }
    }
    if n == 0 {
        return Err(ObjectiveError::BatchTooSmall { need: 1, got: 0 });
    }
    for (m, which) in [(q_v2t, "v2t target"), (q_t2v, "t2v target"), (p_v2t, "v2t"), (p_t2v, "t2v")] {
        for (row, r) in m.view().axis_iter(Axis(0)).enumerate() {
            let sum = r.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(ObjectiveError::RowNotNormalized { which, row, sum });
            }
        }
    }

    let kl = |q: ArrayView2<'_, f64>, p: ArrayView2<'_, f64>| -> f64 {
        q.iter()
            .zip(p.iter())
            .filter(|(q, _)| **q > 0.0)
            .map(|(q, p)| q * (q.ln() - p.ln()))
            .sum()
    };
    let scale = 1.0 / (2.0 * n as f64);
    let loss = scale * (kl(q_v2t.view(), p_t2v.view()) + kl(q_t2v.view(), p_v2t.view()));
    let grad_logits_t2v = (&p_t2v.view() - &q_v2t.view()) * scale;
    let grad_logits_v2t = (&p_v2t.view() - &q_t2v.view()) * scale;
    Ok(ConsistencyOutput { loss, grad_logits_v2t, grad_logits_t2v })
}

/// Maps logit gradients of `S/τ` (v2t) and `Sᵀ/τ` (t2v) back onto `S`.
pub fn logit_grads_to_scores(
    grad_v2t: ArrayView2<'_, f64>,
    grad_t2v: ArrayView2<'_, f64>,
    tau: f64,
) -> Array2<f64> {
    (&grad_v2t + &grad_t2v.t()) / tau
}
