//! Desk-scale stand-in for the encoders: a synthetic clustered bimodal
//! corpus, tiny linear encoders with projection heads, a fusion head for
//! matching and masked-token prediction, and the epoch loop that feeds
//! the scheduler while it trains.

mod corpus;
mod model;
mod train;

pub use corpus::{generate_corpus, CorpusSpec, SyntheticCorpus, Vocab};
pub use model::{
    BatchData, Block, Encoded, LossSettings, LossWeights, ModelDims, NegativeSource, StepOutput,
    ToyModel,
};
pub use train::{
    EpochMetrics, EpochOutcome, EpochTiming, ProbeSettings, SchedulerKind, TrainSettings, TrainState,
};

use thiserror::Error;

use crate::grit::ScheduleError;
use crate::objectives::ObjectiveError;
use crate::types::EmbeddingError;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("corpus spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error("schedule does not match corpus: {0}")]
    ScheduleMismatch(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("evaluation failed: {0}")]
    Eval(String),
    #[error("flush worker panicked")]
    WorkerPanicked,
}
