//! Grouped mini-batch scheduling (GRIT) for hard-negative contrastive
//! training, together with the contrastive / matching / masked-token loss
//! stack and a desk-scale toy model to exercise them end to end.
//!
//! The crate is organised bottom-up:
//!
//! * [`config`], [`rng`], [`types`]: validated configuration, labelled
//!   deterministic random streams and the shared domain types.
//! * [`similarity`]: cross-modal score matrices and their row softmax.
//! * [`grit`]: the four-phase scheduler (collect, example shuffle, greedy
//!   alternating grouping, mini-batch shuffle) plus the naive variant.
//! * [`objectives`]: ITC, consistency, ITM, MLM and their composition, with
//!   analytic gradients and in-batch hard-negative sampling.
//! * [`toymodel`]: synthetic clustered corpus, tiny encoders and the epoch
//!   loop that interleaves training with collection.
//! * [`eval`]: usage-of-vision, retrieval recall and negative hardness.
//! * [`format`]: the bit-exact schedule dump and the corpus container.
//! * [`experiment`]: multi-arm experiment plans, runs and comparisons.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod format;
pub mod grit;
pub mod objectives;
pub mod rng;
pub mod similarity;
pub mod toymodel;
pub mod types;

pub use config::{ConfigError, GritConfig, ValidatedConfig};
pub use rng::{derive_stream, RngStream, StreamLabel};
pub use types::{EmbeddingTable, ExampleId};
