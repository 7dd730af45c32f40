use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use super::collector::{flush, CollectorState};
use super::grouping::GroupingOptions;
use super::schedule::{build_epoch_schedule, EpochSchedule, Provenance};
use super::{ScheduleError, SchedulerStreams};
use crate::config::ValidatedConfig;
use crate::types::{EmbeddingTable, ExampleId};

#[derive(Debug, Clone)]
pub struct NaiveOutcome {
    pub schedule: EpochSchedule,
    /// Time spent in the extra forward pass.
    pub forward_time: Duration,
    /// Forward pass plus grouping and batching.
    pub total_time: Duration,
}

/// Builds a grouped schedule at epoch start from a dedicated forward pass
/// over the whole dataset, instead of features collected while training.
pub fn naive_schedule<F>(
    cfg: &ValidatedConfig,
    opts: &GroupingOptions,
    streams: &SchedulerStreams,
    epoch: u32,
    encode: F,
) -> Result<NaiveOutcome, ScheduleError>
where
    F: FnMut(&[ExampleId]) -> (EmbeddingTable, EmbeddingTable),
{
    let started = Instant::now();
    let mut order: Vec<ExampleId> = (0..cfg.dataset_size).map(ExampleId::from).collect();
    order.shuffle(&mut streams.naive_order(epoch as u64));
    let mut out = naive_schedule_with_order(cfg, opts, streams, epoch, &order, encode)?;
    out.total_time = started.elapsed();
    Ok(out)
}

/// The naive pipeline after its full-data shuffle, for a given `order`.
///
/// Flush `k` uses the same pre-assigned streams as flush `k` of a
/// concurrent epoch, so both paths agree when fed identical features in an
/// identical order.
pub fn naive_schedule_with_order<F>(
    cfg: &ValidatedConfig,
    opts: &GroupingOptions,
    streams: &SchedulerStreams,
    epoch: u32,
    order: &[ExampleId],
    mut encode: F,
) -> Result<NaiveOutcome, ScheduleError>
where
    F: FnMut(&[ExampleId]) -> (EmbeddingTable, EmbeddingTable),
{
    let started = Instant::now();
    let mut forward_time = Duration::ZERO;
    let mut state = CollectorState::new(cfg.queue_capacity, cfg.embed_dim);
    let mut index_array = Vec::with_capacity(order.len());
    let mut flushes = 0u64;

    for chunk in order.chunks(cfg.batch_size) {
        let t = Instant::now();
        let (img, txt) = encode(chunk);
        forward_time += t.elapsed();
        let mut offset = 0;
        while offset < chunk.len() {
            let take = state.remaining().min(chunk.len() - offset);
            let rows: Vec<usize> = (offset..offset + take).collect();
            state.collect(&img.select(&rows), &txt.select(&rows), &chunk[offset..offset + take])?;
            offset += take;
            if state.is_full() {
                index_array.extend(run_flush(&mut state, cfg, opts, streams, epoch, flushes)?);
                flushes += 1;
            }
        }
    }
    if !state.is_empty() {
        index_array.extend(run_flush(&mut state, cfg, opts, streams, epoch, flushes)?);
    }

    let mut schedule = build_epoch_schedule(
        &index_array,
        cfg.batch_size,
        epoch,
        &mut streams.batch_shuffle(epoch as u64),
    )?;
    schedule.provenance = Provenance::Naive;
    Ok(NaiveOutcome { schedule, forward_time, total_time: started.elapsed() })
}

fn run_flush(
    state: &mut CollectorState,
    cfg: &ValidatedConfig,
    opts: &GroupingOptions,
    streams: &SchedulerStreams,
    epoch: u32,
    flush_index: u64,
) -> Result<Vec<ExampleId>, ScheduleError> {
    flush(
        state,
        cfg.search_space,
        opts,
        &mut streams.example_shuffle(epoch as u64, flush_index),
        &mut streams.grouping_start(epoch as u64, flush_index),
    )
}
