use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ScheduleError;
use crate::rng::RngStream;
use crate::types::ExampleId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Grit,
    Random,
    Naive,
    Loaded,
}

/// The ordered partition of all dataset ids into mini-batches for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSchedule {
    pub epoch: u32,
    pub batch_size: usize,
    pub batches: Vec<Vec<ExampleId>>,
    pub provenance: Provenance,
}

impl EpochSchedule {
    /// Cuts `order` into consecutive batches of `batch_size` (last one may be short).
    pub fn from_order(
        order: Vec<ExampleId>,
        batch_size: usize,
        epoch: u32,
        provenance: Provenance,
    ) -> Result<Self, ScheduleError> {
        if batch_size == 0 {
            return Err(ScheduleError::NotAPermutation("batch size is zero".into()));
        }
        check_permutation(&order)?;
        let batches = order.chunks(batch_size).map(<[ExampleId]>::to_vec).collect();
        Ok(Self { epoch, batch_size, batches, provenance })
    }

    pub fn dataset_size(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    pub fn order(&self) -> Vec<ExampleId> {
        self.batches.iter().flatten().copied().collect()
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn is_permutation(&self) -> bool {
        check_permutation(&self.order()).is_ok()
    }
}

/// Ok iff `ids` is a permutation of `0..ids.len()`.
pub(crate) fn check_permutation(ids: &[ExampleId]) -> Result<(), ScheduleError> {
    let mut seen = vec![false; ids.len()];
    for id in ids {
        let i = id.index();
        if i >= ids.len() {
            return Err(ScheduleError::NotAPermutation(format!(
                "id {i} out of range for {} entries",
                ids.len()
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(ScheduleError::NotAPermutation(format!("id {i} appears twice")));
        }
    }
    Ok(())
}

/// Mini-batch-level shuffle of the full index array.
///
/// `⌊D/N⌋` full batches are shuffled as units; a `D mod N` tail stays last.
/// Batch interiors are never reordered.
pub fn build_epoch_schedule(
    index_array: &[ExampleId],
    batch_size: usize,
    epoch: u32,
    rng: &mut RngStream,
) -> Result<EpochSchedule, ScheduleError> {
    let mut sched =
        EpochSchedule::from_order(index_array.to_vec(), batch_size, epoch, Provenance::Grit)?;
    let full = index_array.len() / batch_size;
    sched.batches[..full].shuffle(rng);
    Ok(sched)
}

/// Uniformly random schedule used when no grouped order exists yet.
pub fn first_epoch_schedule(
    dataset_size: usize,
    batch_size: usize,
    epoch: u32,
    rng: &mut RngStream,
) -> EpochSchedule {
    let mut order: Vec<ExampleId> = (0..dataset_size).map(ExampleId::from).collect();
    order.shuffle(rng);
    EpochSchedule::from_order(order, batch_size, epoch, Provenance::Random)
        .expect("a shuffled range is a permutation")
}
