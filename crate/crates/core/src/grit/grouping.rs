use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::collector::SubQueue;
use super::ScheduleError;
use crate::rng::RngStream;
use crate::similarity::{masked_argmax, softmax_rows, Direction};
use crate::types::ExampleId;

/// How a greedy step scores candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionForm {
    /// Masked argmax over raw similarity rows.
    #[default]
    Raw,
    /// Materialise the row-softmaxed matrices and zero out visited entries
    /// before each argmax.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupingOptions {
    pub first_direction: Direction,
    pub form: SelectionForm,
}

/// How an entry of an [`IndexChain`] was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Start,
    V2T,
    T2V,
}

impl From<Direction> for Step {
    fn from(d: Direction) -> Self {
        match d {
            Direction::V2T => Step::V2T,
            Direction::T2V => Step::T2V,
        }
    }
}

/// Greedy visiting order of one sub-queue.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexChain {
    /// Original dataset ids, in visiting order.
    pub ids: Vec<ExampleId>,
    /// Positions within the sub-queue, in visiting order.
    pub positions: Vec<usize>,
    pub trace: Vec<Step>,
}

impl IndexChain {
    pub fn count(&self, step: Step) -> usize {
        self.trace.iter().filter(|s| **s == step).count()
    }

    /// Start first, then strictly alternating directions.
    pub fn alternates(&self) -> bool {
        if self.trace.first() != Some(&Step::Start) {
            return false;
        }
        let rest = &self.trace[1..];
        rest.iter().all(|s| *s != Step::Start) && rest.windows(2).all(|w| w[0] != w[1])
    }
}

/// Groups `sq` starting from a uniformly drawn position.
pub fn group(
    sq: &SubQueue,
    rng: &mut RngStream,
    opts: &GroupingOptions,
) -> Result<IndexChain, ScheduleError> {
    if sq.len() < 2 {
        return Err(ScheduleError::TooSmall(sq.len()));
    }
    let start = rng.random_range(0..sq.len());
    group_from(sq, start, opts)
}

/// Greedy alternating walk from `start`.
///
/// After a v2t step the walk continues from the chosen example's text
/// (t2v row), after a t2v step from its image (v2t row). Every chosen
/// position, the start included, is excluded from all later steps.
pub fn group_from(
    sq: &SubQueue,
    start: usize,
    opts: &GroupingOptions,
) -> Result<IndexChain, ScheduleError> {
    let m = sq.len();
    if m < 2 {
        return Err(ScheduleError::TooSmall(m));
    }
    assert!(start < m, "start {start} outside sub-queue of {m}");

    let scores = sq.img.dot(&sq.txt.t());
    let mut walker = match opts.form {
        SelectionForm::Raw => Walker::Raw(scores),
        SelectionForm::Softmax => Walker::Softmax {
            v2t: softmax_rows(scores.view(), 1.0),
            t2v: softmax_rows(scores.t(), 1.0),
        },
    };

    let mut unvisited = vec![true; m];
    let mut positions = Vec::with_capacity(m);
    let mut trace = Vec::with_capacity(m);
    let mut current = start;
    let mut dir = opts.first_direction;
    unvisited[start] = false;
    walker.exclude(start);
    positions.push(start);
    trace.push(Step::Start);

    for _ in 1..m {
        let next = walker.select(current, dir, &unvisited);
        unvisited[next] = false;
        walker.exclude(next);
        positions.push(next);
        trace.push(dir.into());
        current = next;
        dir = dir.flip();
    }

    Ok(IndexChain {
        ids: positions.iter().map(|&p| sq.ids[p]).collect(),
        positions,
        trace,
    })
}

enum Walker {
    Raw(Array2<f64>),
    Softmax { v2t: Array2<f64>, t2v: Array2<f64> },
}

impl Walker {
    fn select(&self, current: usize, dir: Direction, unvisited: &[bool]) -> usize {
        let row: ArrayView1<'_, f64> = match (self, dir) {
            (Walker::Raw(s), Direction::V2T) => s.row(current),
            (Walker::Raw(s), Direction::T2V) => s.column(current),
            (Walker::Softmax { v2t, .. }, Direction::V2T) => v2t.row(current),
            (Walker::Softmax { t2v, .. }, Direction::T2V) => t2v.row(current),
        };
        // the mask also guards the softmax form against live entries that
        // underflow to the zero used for excluded ones
        masked_argmax(row, unvisited).expect("at least one unvisited position remains")
    }

    fn exclude(&mut self, k: usize) {
        if let Walker::Softmax { v2t, t2v } = self {
            // only the column matters: a visited row is never read again
            // once the walk has moved past it
            v2t.column_mut(k).fill(0.0);
            t2v.column_mut(k).fill(0.0);
        }
    }
}
