use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::{BatchData, LossSettings, LossWeights, ModelDims, NegativeSource, ToyModel};
use super::{SyntheticCorpus, ToyError};
use crate::config::ValidatedConfig;
use crate::eval::{retrieval_at_k, HardnessAccumulator, HardnessReport};
use crate::grit::{
    build_epoch_schedule, first_epoch_schedule, naive_schedule, CollectorState, EpochSchedule,
    FrozenQueue, GroupingOptions, Provenance, ScheduleError, SchedulerStreams, SelectionForm,
};
use crate::objectives::{mask_tokens, FeatureQueue, MaskingScheme};
use crate::rng::{derive_stream, StreamLabel};
use crate::types::{EmbeddingTable, ExampleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    /// Fresh uniform permutation every epoch.
    Random,
    /// Grouped order built from features collected during the previous epoch.
    Grit,
    /// Grouped order built from an extra forward pass at each epoch start.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    /// Steps between retrieval probes.
    pub every: u64,
    /// Mean R@1 (both directions) that counts as reached.
    pub threshold: f64,
    /// Number of held-out examples to rank against each other.
    pub slice: usize,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub hidden: usize,
    pub fusion_hidden: usize,
    pub scheduler: SchedulerKind,
    /// Extra contrastive negatives from a FIFO of past batches; 0 disables.
    #[serde(default)]
    pub itc_queue: usize,
    /// 80/10/10 corruption of training masks.
    #[serde(default = "yes")]
    pub corrupt_masks: bool,
    /// Run flushes on worker threads while training continues.
    #[serde(default)]
    pub concurrent_flush: bool,
    #[serde(default)]
    pub grouping_form: SelectionForm,
    #[serde(default)]
    pub probe: Option<ProbeSettings>,
    /// Evaluate retrieval on the held-out slice after every epoch.
    #[serde(default = "yes")]
    pub eval_retrieval: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            hidden: 64,
            fusion_hidden: 32,
            scheduler: SchedulerKind::Grit,
            itc_queue: 0,
            corrupt_masks: true,
            concurrent_flush: false,
            grouping_form: SelectionForm::Raw,
            probe: None,
            eval_retrieval: true,
        }
    }
}

/// Deterministic per-epoch numbers. Wall time lives in [`EpochTiming`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub steps: u64,
    pub provenance: Provenance,
    pub itc: f64,
    pub cons: f64,
    pub itm: f64,
    pub mlm: f64,
    pub total: f64,
    pub hardness: HardnessReport,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochTiming {
    /// Building this epoch's schedule before training (naive forward pass included).
    pub schedule_seconds: f64,
    /// Training steps, collection and flushes, up to the next schedule being ready.
    pub train_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub metrics: EpochMetrics,
    pub timing: EpochTiming,
    /// The schedule this epoch trained on.
    pub schedule: EpochSchedule,
    /// Schedule prepared for the following epoch, if the scheduler builds one ahead.
    pub next: Option<EpochSchedule>,
}

enum FlushSlot {
    Done(Vec<ExampleId>),
    Running(JoinHandle<Result<Vec<ExampleId>, ScheduleError>>),
}

/// Model, optimiser and scheduler state carried across epochs.
pub struct TrainState<'c> {
    corpus: &'c SyntheticCorpus,
    cfg: ValidatedConfig,
    settings: TrainSettings,
    pub model: ToyModel,
    streams: SchedulerStreams,
    opts: GroupingOptions,
    epoch: u32,
    step: u64,
    collector: CollectorState,
    slots: Vec<FlushSlot>,
    pending: Option<EpochSchedule>,
    queue: Option<FeatureQueue>,
    steps_to_threshold: Option<u64>,
}

impl<'c> TrainState<'c> {
    pub fn new(corpus: &'c SyntheticCorpus, cfg: ValidatedConfig, settings: TrainSettings) -> Result<Self, ToyError> {
        if cfg.dataset_size != corpus.train_size() {
            return Err(ToyError::ScheduleMismatch(format!(
                "config dataset_size {} but corpus has {} training examples",
                cfg.dataset_size,
                corpus.train_size()
            )));
        }
        let dims = ModelDims {
            image_dim: corpus.spec.image_dim,
            hidden: settings.hidden,
            embed_dim: cfg.embed_dim,
            fusion_hidden: settings.fusion_hidden,
            vocab_size: corpus.vocab.size as usize,
            seq_len: corpus.spec.seq_len,
        };
        let model = ToyModel::new(dims, &mut derive_stream(cfg.master_seed, StreamLabel::WeightInit));
        let queue = (settings.itc_queue > 0).then(|| FeatureQueue::new(settings.itc_queue, cfg.embed_dim));
        Ok(Self {
            corpus,
            streams: SchedulerStreams::new(cfg.master_seed),
            opts: GroupingOptions { first_direction: cfg.first_direction, form: settings.grouping_form },
            collector: CollectorState::new(cfg.queue_capacity, cfg.embed_dim),
            cfg,
            settings,
            model,
            epoch: 0,
            step: 0,
            slots: Vec::new(),
            pending: None,
            queue,
            steps_to_threshold: None,
        })
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &ValidatedConfig {
        &self.cfg
    }

    /// First global step at which the retrieval probe reached its threshold.
    pub fn steps_to_threshold(&self) -> Option<u64> {
        self.steps_to_threshold
    }

    /// Use `schedule` for the next epoch instead of the scheduler's own choice.
    pub fn set_next_schedule(&mut self, schedule: EpochSchedule) {
        self.pending = Some(schedule);
    }

    pub fn pending_schedule(&self) -> Option<&EpochSchedule> {
        self.pending.as_ref()
    }

    fn masking(&self) -> MaskingScheme {
        let v = self.corpus.vocab;
        MaskingScheme {
            mask_prob: self.cfg.mask_prob,
            mask_token: v.mask,
            first_regular: v.topic_base,
            vocab_size: v.size,
            corrupt: self.settings.corrupt_masks,
        }
    }

    /// Builds (or takes) this epoch's schedule, then trains on it.
    pub fn run_epoch(&mut self) -> Result<EpochOutcome, ToyError> {
        let started = Instant::now();
        let schedule = self.schedule_for_epoch()?;
        let schedule_seconds = started.elapsed().as_secs_f64();
        let mut out = self.train_epoch(&schedule)?;
        out.timing.schedule_seconds = schedule_seconds;
        out.timing.total_seconds += schedule_seconds;
        Ok(out)
    }

    fn schedule_for_epoch(&mut self) -> Result<EpochSchedule, ToyError> {
        if let Some(s) = self.pending.take() {
            return Ok(s);
        }
        let (d, n, e) = (self.cfg.dataset_size, self.cfg.batch_size, self.epoch);
        if self.settings.scheduler == SchedulerKind::Naive && e > 0 {
            let model = &self.model;
            let corpus = self.corpus;
            let mut failure = None;
            let outcome = naive_schedule(&self.cfg, &self.opts, &self.streams, e, |ids: &[ExampleId]| {
                match model.encode_batch(corpus.batch_images(ids).view(), corpus.batch_tokens(ids).view()) {
                    Ok(enc) => (enc.img, enc.txt),
                    Err(err) => {
                        failure.get_or_insert(err);
                        let mut unit = ndarray::Array2::zeros((ids.len(), model.dims().embed_dim));
                        unit.column_mut(0).fill(1.0);
                        let t = EmbeddingTable::new(unit).expect("unit rows");
                        (t.clone(), t)
                    }
                }
            })?;
            if let Some(err) = failure {
                return Err(err);
            }
            return Ok(outcome.schedule);
        }
        Ok(first_epoch_schedule(d, n, e, &mut self.streams.random_order(e as u64)))
    }

    fn check_schedule(&self, schedule: &EpochSchedule) -> Result<(), ToyError> {
        let d = self.cfg.dataset_size;
        if schedule.batch_size != self.cfg.batch_size {
            return Err(ToyError::ScheduleMismatch(format!(
                "batch size {} but config says {}",
                schedule.batch_size, self.cfg.batch_size
            )));
        }
        if schedule.dataset_size() != d || !schedule.is_permutation() {
            return Err(ToyError::ScheduleMismatch(format!(
                "schedule is not a permutation of the {d} training ids"
            )));
        }
        Ok(())
    }

    /// One pass over `schedule`: per batch encode, compute all losses, take
    /// an SGD step and feed the pre-update features to the collector.
    pub fn train_epoch(&mut self, schedule: &EpochSchedule) -> Result<EpochOutcome, ToyError> {
        self.check_schedule(schedule)?;
        let started = Instant::now();
        let grit = self.settings.scheduler == SchedulerKind::Grit;
        let scheme = self.masking();
        let mask_root = derive_stream(self.cfg.master_seed, StreamLabel::Masking);
        let neg_root = derive_stream(self.cfg.master_seed, StreamLabel::NegativeSampling);
        let weights = LossWeights::default();
        let mut hardness = HardnessAccumulator::default();
        let mut sums = [0.0; 5];
        let mut trained = 0u64;
        let mut eval_secs = 0.0;
        let mut flushes = 0u64;

        for ids in &schedule.batches {
            let images = self.corpus.batch_images(ids);
            let tokens = self.corpus.batch_tokens(ids);
            let (img, txt) = if ids.len() < 2 {
                // too small for in-batch objectives; still scheduled and collected
                let enc = self.model.encode_batch(images.view(), tokens.view())?;
                (enc.img, enc.txt)
            } else {
                let masked = mask_tokens(tokens.view(), &scheme, &mut mask_root.substream(self.step));
                let batch = BatchData { images, tokens, masked };
                let settings = LossSettings {
                    tau: self.cfg.temperature,
                    lambda_cons: self.cfg.lambda_cons,
                    weights,
                    negatives: self.cfg.negatives,
                    queue: self.queue.as_ref().filter(|q| !q.is_empty()),
                    targets: None,
                };
                let mut rng = neg_root.substream(self.step);
                let out = self.model.loss_and_grad(&batch, &settings, NegativeSource::Sample(&mut rng))?;
                self.model.sgd_step(&out.bundle.grads, self.settings.learning_rate);
                let labels: Vec<u32> = ids.iter().map(|id| self.corpus.label(*id)).collect();
                hardness.add_batch(out.scores.view(), &out.negatives, &labels);
                let b = &out.bundle;
                for (s, v) in sums.iter_mut().zip([b.itc, b.cons, b.itm, b.mlm, b.total]) {
                    *s += v;
                }
                trained += 1;
                self.step += 1;
                if let Some(q) = self.queue.as_mut() {
                    q.push_batch(out.encoded.img.view(), out.encoded.txt.view());
                }
                if let Some(p) = self.settings.probe {
                    if self.steps_to_threshold.is_none() && self.step.is_multiple_of(p.every) {
                        let t = Instant::now();
                        let ids: Vec<ExampleId> = self.corpus.eval_ids().into_iter().take(p.slice).collect();
                        let r = retrieval_at_k(&self.model, self.corpus, &ids, &[1]).map_err(eval_to_toy)?;
                        if r[0].mean() >= p.threshold {
                            self.steps_to_threshold = Some(self.step);
                        }
                        eval_secs += t.elapsed().as_secs_f64();
                    }
                }
                (out.encoded.img, out.encoded.txt)
            };
            if grit {
                self.collect(&img, &txt, ids, &mut flushes)?;
            }
        }

        let next = match self.settings.scheduler {
            SchedulerKind::Grit => {
                if !self.collector.is_empty() {
                    self.flush(flushes)?;
                }
                let mut order = Vec::with_capacity(self.cfg.dataset_size);
                for slot in self.slots.drain(..) {
                    match slot {
                        FlushSlot::Done(ids) => order.extend(ids),
                        FlushSlot::Running(h) => order.extend(h.join().map_err(|_| ToyError::WorkerPanicked)??),
                    }
                }
                let target = self.epoch + 1;
                let s = build_epoch_schedule(
                    &order,
                    self.cfg.batch_size,
                    target,
                    &mut self.streams.batch_shuffle(target as u64),
                )?;
                self.pending = Some(s.clone());
                Some(s)
            }
            _ => None,
        };
        let train_seconds = started.elapsed().as_secs_f64() - eval_secs;

        let (mut r1_i2t, mut r1_t2i) = (f64::NAN, f64::NAN);
        let eval_ids = self.corpus.eval_ids();
        if self.settings.eval_retrieval && eval_ids.len() >= 2 {
            let r = retrieval_at_k(&self.model, self.corpus, &eval_ids, &[1]).map_err(eval_to_toy)?;
            (r1_i2t, r1_t2i) = (r[0].i2t, r[0].t2i);
        }
        let mean = |s: f64| if trained == 0 { 0.0 } else { s / trained as f64 };
        let metrics = EpochMetrics {
            epoch: self.epoch,
            steps: trained,
            provenance: schedule.provenance,
            itc: mean(sums[0]),
            cons: mean(sums[1]),
            itm: mean(sums[2]),
            mlm: mean(sums[3]),
            total: mean(sums[4]),
            hardness: hardness.report(),
            r1_i2t,
            r1_t2i,
        };
        self.epoch += 1;
        Ok(EpochOutcome {
            metrics,
            timing: EpochTiming { schedule_seconds: 0.0, train_seconds, total_seconds: train_seconds },
            schedule: schedule.clone(),
            next,
        })
    }

    /// Feeds one batch of features to the collector, splitting it at the
    /// capacity boundary and flushing whenever the queue fills.
    fn collect(&mut self, img: &EmbeddingTable, txt: &EmbeddingTable, ids: &[ExampleId], flushes: &mut u64) -> Result<(), ToyError> {
        let mut offset = 0;
        while offset < ids.len() {
            let take = self.collector.remaining().min(ids.len() - offset);
            let rows: Vec<usize> = (offset..offset + take).collect();
            self.collector.collect(&img.select(&rows), &txt.select(&rows), &ids[offset..offset + take])?;
            offset += take;
            if self.collector.is_full() {
                self.flush(*flushes)?;
                *flushes += 1;
            }
        }
        Ok(())
    }

    /// Flush `k` of this epoch, keyed to the epoch whose schedule it builds.
    fn flush(&mut self, k: u64) -> Result<(), ToyError> {
        let target = self.epoch as u64 + 1;
        let mut shuffle = self.streams.example_shuffle(target, k);
        let mut start = self.streams.grouping_start(target, k);
        let frozen: FrozenQueue = self.collector.take();
        let m = self.cfg.search_space;
        let opts = self.opts;
        if self.settings.concurrent_flush {
            let handle = std::thread::spawn(move || frozen.group_all(m, &opts, &mut shuffle, &mut start));
            self.slots.push(FlushSlot::Running(handle));
        } else {
            self.slots.push(FlushSlot::Done(frozen.group_all(m, &opts, &mut shuffle, &mut start)?));
        }
        Ok(())
    }
}

fn eval_to_toy(e: crate::eval::EvalError) -> ToyError {
    match e {
        crate::eval::EvalError::Toy(t) => t,
        other => ToyError::Eval(other.to_string()),
    }
}
