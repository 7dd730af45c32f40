use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::SliceRandom;

use super::grouping::{group, GroupingOptions};
use super::ScheduleError;
use crate::rng::RngStream;
use crate::types::{EmbeddingTable, ExampleId};

/// The paired feature queues and the index queue filled during an epoch.
///
/// Row `k` of the image queue, the text queue and the index queue always
/// belong to the same example.
#[derive(Debug, Clone)]
pub struct CollectorState {
    capacity: usize,
    dim: usize,
    img: Vec<f64>,
    txt: Vec<f64>,
    ids: Vec<ExampleId>,
    seen: HashSet<ExampleId>,
}

impl CollectorState {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            img: Vec::with_capacity(capacity * dim),
            txt: Vec::with_capacity(capacity * dim),
            ids: Vec::with_capacity(capacity),
            seen: HashSet::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.ids.len()
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.fill()
    }

    pub fn is_full(&self) -> bool {
        self.fill() == self.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ExampleId] {
        &self.ids
    }

    pub fn img_row(&self, k: usize) -> &[f64] {
        &self.img[k * self.dim..(k + 1) * self.dim]
    }

    pub fn txt_row(&self, k: usize) -> &[f64] {
        &self.txt[k * self.dim..(k + 1) * self.dim]
    }

    /// Appends one batch of aligned features; returns `true` once the queue
    /// is full.
    pub fn collect(
        &mut self,
        img: &EmbeddingTable,
        txt: &EmbeddingTable,
        ids: &[ExampleId],
    ) -> Result<bool, ScheduleError> {
        if img.rows() != ids.len() || txt.rows() != ids.len() {
            return Err(ScheduleError::MisalignedBatch(format!(
                "{} image rows, {} text rows, {} ids",
                img.rows(),
                txt.rows(),
                ids.len()
            )));
        }
        if img.dim() != self.dim || txt.dim() != self.dim {
            return Err(ScheduleError::MisalignedBatch(format!(
                "feature dims {}/{} differ from queue dim {}",
                img.dim(),
                txt.dim(),
                self.dim
            )));
        }
        if self.fill() + ids.len() > self.capacity {
            return Err(ScheduleError::Overflow {
                fill: self.fill(),
                batch: ids.len(),
                capacity: self.capacity,
            });
        }
        let mut fresh = HashSet::with_capacity(ids.len());
        for id in ids {
            if self.seen.contains(id) || !fresh.insert(*id) {
                return Err(ScheduleError::MisalignedBatch(format!(
                    "example {id} already collected in this flush cycle"
                )));
            }
        }
        self.seen.extend(fresh);
        self.ids.extend_from_slice(ids);
        self.img.extend(img.view().iter());
        self.txt.extend(txt.view().iter());
        Ok(self.is_full())
    }

    /// Reorders all three queues so that new row `k` is old row `perm[k]`.
    pub fn apply_permutation(&mut self, perm: &[usize]) {
        assert_eq!(perm.len(), self.fill(), "permutation length must equal fill");
        let d = self.dim;
        let mut img = Vec::with_capacity(self.img.len());
        let mut txt = Vec::with_capacity(self.txt.len());
        let mut ids = Vec::with_capacity(self.ids.len());
        for &k in perm {
            img.extend_from_slice(&self.img[k * d..(k + 1) * d]);
            txt.extend_from_slice(&self.txt[k * d..(k + 1) * d]);
            ids.push(self.ids[k]);
        }
        self.img = img;
        self.txt = txt;
        self.ids = ids;
    }

    /// One shared uniform permutation applied to all three queues.
    pub fn example_shuffle(&mut self, rng: &mut RngStream) {
        let mut perm: Vec<usize> = (0..self.fill()).collect();
        perm.shuffle(rng);
        self.apply_permutation(&perm);
    }

    /// Cuts the queue, in order, into sub-queues of `m` rows.
    ///
    /// A short tail (only possible on a partial final flush) becomes its own
    /// sub-queue when it has at least two rows; a single leftover row is
    /// passed through ungrouped.
    pub fn split_subqueues(&self, m: usize) -> Split {
        assert!(m > 0, "sub-queue size must be positive");
        let d = self.dim;
        let mut subqueues = Vec::new();
        let mut passthrough = Vec::new();
        let mut start = 0;
        while start < self.fill() {
            let end = (start + m).min(self.fill());
            let rows = end - start;
            if rows < 2 {
                passthrough.extend_from_slice(&self.ids[start..end]);
            } else {
                let img = Array2::from_shape_vec((rows, d), self.img[start * d..end * d].to_vec())
                    .expect("queue rows are dim-aligned");
                let txt = Array2::from_shape_vec((rows, d), self.txt[start * d..end * d].to_vec())
                    .expect("queue rows are dim-aligned");
                subqueues.push(SubQueue { img, txt, ids: self.ids[start..end].to_vec() });
            }
            start = end;
        }
        Split { subqueues, passthrough }
    }

    /// Hands the current contents off as an owned, frozen queue and empties
    /// this collector for the next flush cycle.
    pub fn take(&mut self) -> FrozenQueue {
        let frozen = FrozenQueue {
            state: CollectorState {
                capacity: self.capacity,
                dim: self.dim,
                img: std::mem::take(&mut self.img),
                txt: std::mem::take(&mut self.txt),
                ids: std::mem::take(&mut self.ids),
                seen: std::mem::take(&mut self.seen),
            },
        };
        self.img.reserve(self.capacity * self.dim);
        self.txt.reserve(self.capacity * self.dim);
        frozen
    }
}

/// Aligned rows of one grouping search space.
#[derive(Debug, Clone, PartialEq)]
pub struct SubQueue {
    pub img: Array2<f64>,
    pub txt: Array2<f64>,
    pub ids: Vec<ExampleId>,
}

impl SubQueue {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub subqueues: Vec<SubQueue>,
    pub passthrough: Vec<ExampleId>,
}

/// A filled queue detached from its collector; can be grouped on another
/// thread while collection continues.
#[derive(Debug, Clone)]
pub struct FrozenQueue {
    state: CollectorState,
}

impl FrozenQueue {
    pub fn fill(&self) -> usize {
        self.state.fill()
    }

    /// Example shuffle, split, then group each sub-queue in order. Returns
    /// the grouped ids in original dataset indices.
    pub fn group_all(
        mut self,
        m: usize,
        opts: &GroupingOptions,
        rng_shuffle: &mut RngStream,
        rng_start: &mut RngStream,
    ) -> Result<Vec<ExampleId>, ScheduleError> {
        self.state.example_shuffle(rng_shuffle);
        let split = self.state.split_subqueues(m);
        let mut out = Vec::with_capacity(self.state.fill());
        for sq in &split.subqueues {
            out.extend(group(sq, rng_start, opts)?.ids);
        }
        out.extend(split.passthrough);
        Ok(out)
    }
}

/// Phases 2 and 3 on the current queue contents, leaving the queues empty.
pub fn flush(
    state: &mut CollectorState,
    m: usize,
    opts: &GroupingOptions,
    rng_shuffle: &mut RngStream,
    rng_start: &mut RngStream,
) -> Result<Vec<ExampleId>, ScheduleError> {
    state.take().group_all(m, opts, rng_shuffle, rng_start)
}
