//! Queue-extended contrastive baseline: previously seen features act as
//! extra negatives in the softmax denominators.

use std::collections::VecDeque;

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use super::ObjectiveError;
use crate::similarity::{softmax_rows, Direction, DistributionMatrix, SimilarityError};

/// FIFO of detached projected features, one queue per modality.
#[derive(Debug, Clone)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    img: VecDeque<Vec<f64>>,
    txt: VecDeque<Vec<f64>>,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, img: VecDeque::new(), txt: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.img.len()
    }

    pub fn is_empty(&self) -> bool {
        self.img.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Enqueues a batch, evicting the oldest rows beyond capacity.
    pub fn push_batch(&mut self, img: ArrayView2<'_, f64>, txt: ArrayView2<'_, f64>) {
        for (a, b) in img.axis_iter(Axis(0)).zip(txt.axis_iter(Axis(0))) {
            self.img.push_back(a.to_vec());
            self.txt.push_back(b.to_vec());
        }
        while self.img.len() > self.capacity {
            self.img.pop_front();
            self.txt.pop_front();
        }
    }

    fn matrix(rows: &VecDeque<Vec<f64>>, dim: usize) -> Array2<f64> {
        Array2::from_shape_vec((rows.len(), dim), rows.iter().flatten().copied().collect())
            .expect("queue rows share dim")
    }

    pub fn img_matrix(&self) -> Array2<f64> {
        Self::matrix(&self.img, self.dim)
    }

    pub fn txt_matrix(&self) -> Array2<f64> {
        Self::matrix(&self.txt, self.dim)
    }
}

fn check(img: ArrayView2<'_, f64>, txt: ArrayView2<'_, f64>, queue: &FeatureQueue, tau: f64) -> Result<(), ObjectiveError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(SimilarityError::NonPositiveTemperature(tau).into());
    }
    if img.dim() != txt.dim() || img.ncols() != queue.dim {
        return Err(ObjectiveError::Shape(format!(
            "batch {:?}/{:?} vs queue dim {}",
            img.dim(),
            txt.dim(),
            queue.dim
        )));
    }
    if img.nrows() == 0 {
        return Err(ObjectiveError::BatchTooSmall { need: 1, got: 0 });
    }
    Ok(())
}

/// `N × (N + Q)` distributions whose denominators span the batch and the queue.
/// Columns `0..N` are the batch, `N..N+Q` the queue (oldest first).
pub fn queue_extended_distributions(
    img: ArrayView2<'_, f64>,
    txt: ArrayView2<'_, f64>,
    queue: &FeatureQueue,
    tau: f64,
) -> Result<(DistributionMatrix, DistributionMatrix), ObjectiveError> {
    check(img, txt, queue, tau)?;
    let all_txt = concatenate![Axis(0), txt, queue.txt_matrix()];
    let all_img = concatenate![Axis(0), img, queue.img_matrix()];
    let v2t = softmax_rows(img.dot(&all_txt.t()).view(), tau);
    let t2v = softmax_rows(txt.dot(&all_img.t()).view(), tau);
    Ok((
        DistributionMatrix::new(Direction::V2T, v2t).expect("softmax rows"),
        DistributionMatrix::new(Direction::T2V, t2v).expect("softmax rows"),
    ))
}

#[derive(Debug, Clone)]
pub struct QueueItcOutput {
    pub loss: f64,
    pub grad_img: Array2<f64>,
    pub grad_txt: Array2<f64>,
}

/// Contrastive loss over queue-extended denominators. Queue rows are
/// constants; gradients are for the batch rows only.
pub fn itc_loss_with_queue(
    img: ArrayView2<'_, f64>,
    txt: ArrayView2<'_, f64>,
    queue: &FeatureQueue,
    tau: f64,
) -> Result<QueueItcOutput, ObjectiveError> {
    let (p_v2t, p_t2v) = queue_extended_distributions(img, txt, queue, tau)?;
    let n = img.nrows();
    let all_txt = concatenate![Axis(0), txt, queue.txt_matrix()];
    let all_img = concatenate![Axis(0), img, queue.img_matrix()];
    let nll = |p: &DistributionMatrix| (0..n).map(|i| -p.row(i)[i].ln()).sum::<f64>();
    let loss = (nll(&p_v2t) + nll(&p_t2v)) / (2.0 * n as f64);

    let scale = 1.0 / (2.0 * n as f64 * tau);
    let mut g_v2t = p_v2t.into_inner();
    let mut g_t2v = p_t2v.into_inner();
    for i in 0..n {
        g_v2t[[i, i]] -= 1.0;
        g_t2v[[i, i]] -= 1.0;
    }
    g_v2t *= scale;
    g_t2v *= scale;

    // logits_v2t = img · all_txtᵀ, logits_t2v = txt · all_imgᵀ
    let mut grad_img = g_v2t.dot(&all_txt);
    let mut grad_txt = g_t2v.dot(&all_img);
    grad_txt += &g_v2t.slice(ndarray::s![.., ..n]).t().dot(&img);
    grad_img += &g_t2v.slice(ndarray::s![.., ..n]).t().dot(&txt);
    Ok(QueueItcOutput { loss, grad_img, grad_txt })
}
