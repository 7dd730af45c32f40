//! Grouped mini-batch scheduling.
//!
//! One epoch of scheduling works like this: training batches stream their
//! projected features into a [`CollectorState`] of capacity `L`. Whenever it
//! fills up, the queue is flushed: its rows are shuffled at the example
//! level, split into sub-queues of `M` rows, and each sub-queue is ordered
//! by a greedy walk that alternates between image→text and text→image
//! similarity. The concatenated walks form the index array `G`; at the
//! epoch boundary `G` is cut into mini-batches whose order (not contents)
//! is shuffled to give the next epoch's [`EpochSchedule`].

mod collector;
mod grouping;
mod naive;
mod schedule;

pub use collector::{flush, CollectorState, FrozenQueue, Split, SubQueue};
pub use grouping::{group, group_from, GroupingOptions, IndexChain, SelectionForm, Step};
pub use naive::{naive_schedule, naive_schedule_with_order, NaiveOutcome};
pub use schedule::{build_epoch_schedule, first_epoch_schedule, EpochSchedule, Provenance};

use thiserror::Error;

use crate::rng::{derive_stream, RngStream, StreamLabel};

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("collector overflow: fill {fill} + batch {batch} > capacity {capacity}")]
    Overflow { fill: usize, batch: usize, capacity: usize },
    #[error("misaligned batch: {0}")]
    MisalignedBatch(String),
    #[error("sub-queue too small to group: {0} rows")]
    TooSmall(usize),
    #[error("not a permutation: {0}")]
    NotAPermutation(String),
}

/// Substream index for whole-dataset random orders, kept away from flush indices.
const RANDOM_ORDER: u64 = 1 << 40;
const NAIVE_ORDER: u64 = (1 << 40) + 1;

/// Pre-assigned scheduler streams, keyed by epoch and flush number, so that
/// every flush is reproducible regardless of when or where it runs.
#[derive(Debug, Clone, Copy)]
pub struct SchedulerStreams {
    pub master_seed: u64,
}

impl SchedulerStreams {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn example_shuffle(&self, epoch: u64, flush: u64) -> RngStream {
        derive_stream(self.master_seed, StreamLabel::ExampleShuffle)
            .substream(epoch)
            .substream(flush)
    }

    pub fn grouping_start(&self, epoch: u64, flush: u64) -> RngStream {
        derive_stream(self.master_seed, StreamLabel::GroupingStart)
            .substream(epoch)
            .substream(flush)
    }

    pub fn batch_shuffle(&self, epoch: u64) -> RngStream {
        derive_stream(self.master_seed, StreamLabel::BatchShuffle).substream(epoch)
    }

    /// Uniform random order for a random-schedule epoch.
    pub fn random_order(&self, epoch: u64) -> RngStream {
        derive_stream(self.master_seed, StreamLabel::ExampleShuffle)
            .substream(epoch)
            .substream(RANDOM_ORDER)
    }

    /// Full-data reshuffle preceding the naive variant's forward pass.
    pub fn naive_order(&self, epoch: u64) -> RngStream {
        derive_stream(self.master_seed, StreamLabel::ExampleShuffle)
            .substream(epoch)
            .substream(NAIVE_ORDER)
    }
}
