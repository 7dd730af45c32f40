//! Independent reference implementations shared by the integration tests
//! and the acceptance runner. Nothing here calls into the code under test
//! except for input construction.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod grad;

use grit_core::similarity::Direction;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn unit_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let mut a = gaussian(rng, rows, cols);
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    a
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Brute-force greedy walk: every step recomputes the candidate scores
/// from scratch by dot products, skips visited positions and keeps the
/// first maximum. Returns positions and the direction used per step.
pub fn oracle_chain(img: &Array2<f64>, txt: &Array2<f64>, start: usize, first: Direction) -> (Vec<usize>, Vec<Direction>) {
    let m = img.nrows();
    let rows = |a: &Array2<f64>, i: usize| a.row(i).to_vec();
    let mut visited = vec![false; m];
    visited[start] = true;
    let mut chain = vec![start];
    let mut dirs = Vec::new();
    let mut dir = first;
    let mut cur = start;
    while chain.len() < m {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..m {
            if visited[k] {
                continue;
            }
            let s = match dir {
                Direction::V2T => dot(&rows(img, cur), &rows(txt, k)),
                Direction::T2V => dot(&rows(img, k), &rows(txt, cur)),
            };
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        let (k, _) = best.expect("an unvisited position");
        visited[k] = true;
        chain.push(k);
        dirs.push(dir);
        cur = k;
        dir = match dir {
            Direction::V2T => Direction::T2V,
            Direction::T2V => Direction::V2T,
        };
    }
    (chain, dirs)
}

/// Central differences of `f` at `x` with step `h`, over `coords`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64, coords: &[usize]) -> Vec<f64> {
    let mut x = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let l = lse(v);
    v.iter().map(|x| (x - l).exp()).collect()
}

/// Symmetric in-batch contrastive loss of a square score matrix.
pub fn itc_oracle(s: &Array2<f64>, tau: f64) -> f64 {
    let n = s.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| s[[i, j]] / tau).collect();
        let col: Vec<f64> = (0..n).map(|j| s[[j, i]] / tau).collect();
        total += lse(&row) - row[i] + lse(&col) - col[i];
    }
    total / (2.0 * n as f64)
}

/// Row-softmax distributions `(v2t, t2v)` of a score matrix.
pub fn distributions(s: &Array2<f64>, tau: f64) -> (Array2<f64>, Array2<f64>) {
    let n = s.nrows();
    let mut v2t = Array2::zeros((n, n));
    let mut t2v = Array2::zeros((n, n));
    for i in 0..n {
        let r = softmax(&(0..n).map(|j| s[[i, j]] / tau).collect::<Vec<_>>());
        let c = softmax(&(0..n).map(|j| s[[j, i]] / tau).collect::<Vec<_>>());
        for j in 0..n {
            v2t[[i, j]] = r[j];
            t2v[[i, j]] = c[j];
        }
    }
    (v2t, t2v)
}

/// `½ mean_i [KL(q_v2t ‖ p_t2v) + KL(q_t2v ‖ p_v2t)]` with explicit targets.
pub fn consistency_oracle(q: &(Array2<f64>, Array2<f64>), p: &(Array2<f64>, Array2<f64>)) -> f64 {
    let n = q.0.nrows();
    let kl = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        a.iter().zip(b.iter()).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
    };
    (kl(&q.0, &p.1) + kl(&q.1, &p.0)) / (2.0 * n as f64)
}

/// Mean two-way cross-entropy, positives labelled 1, negatives 0.
pub fn itm_oracle(pos: &Array2<f64>, neg: &Array2<f64>) -> f64 {
    let ce = |r: ndarray::ArrayView1<'_, f64>, label: usize| lse(&[r[0], r[1]]) - r[label];
    let total: f64 = pos.rows().into_iter().map(|r| ce(r, 1)).sum::<f64>()
        + neg.rows().into_iter().map(|r| ce(r, 0)).sum::<f64>();
    total / (pos.nrows() + neg.nrows()) as f64
}

pub fn mlm_oracle(logits: &Array2<f64>, targets: &[u32]) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(r, &t)| lse(r.as_slice().unwrap()) - r[t as usize])
        .sum();
    total / targets.len() as f64
}

/// Pearson χ² statistic for observed counts against expected probabilities.
pub fn chi_square(counts: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .filter(|(_, p)| **p > 0.0)
        .map(|(&c, &p)| {
            let e = p * total as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}
