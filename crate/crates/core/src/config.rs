//! Validated scheduler / objective configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::NegativeSampling;
use crate::similarity::Direction;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("`{0}` must be positive")]
    NonPositive(&'static str),
    #[error("size ordering violated: {0}")]
    OrderingViolation(String),
    #[error("divisibility violated: {0}")]
    DivisibilityViolation(String),
    #[error("`{field}` out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config io error: {0}")]
    Io(String),
}

/// Raw configuration as read from a config document.
///
/// Sizes follow the `N ≤ M ≤ L ≤ D` ordering: mini-batch, grouping search
/// space, collection queue, dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GritConfig {
    pub batch_size: usize,
    pub search_space: usize,
    pub queue_capacity: usize,
    pub dataset_size: usize,
    pub temperature: f64,
    pub lambda_cons: f64,
    pub mask_prob: f64,
    pub embed_dim: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub strict_divisibility: bool,
    #[serde(default)]
    pub first_direction: Direction,
    #[serde(default)]
    pub negatives: NegativeSampling,
}

impl Default for GritConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            search_space: 512,
            queue_capacity: 2048,
            dataset_size: 4096,
            temperature: 0.07,
            lambda_cons: 0.2,
            mask_prob: 0.5,
            embed_dim: 16,
            master_seed: 0,
            strict_divisibility: false,
            first_direction: Direction::V2T,
            negatives: NegativeSampling::Multinomial,
        }
    }
}

impl GritConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn validate(self) -> Result<ValidatedConfig, ConfigError> {
        validate_config(self)
    }
}

/// A configuration known to satisfy every invariant, plus derived counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedConfig {
    #[serde(flatten)]
    raw: GritConfig,
    subqueues_per_flush: usize,
    batches_per_epoch: usize,
}

impl ValidatedConfig {
    pub fn raw(&self) -> &GritConfig {
        &self.raw
    }

    /// `⌊L / M⌋` full sub-queues per queue flush.
    pub fn subqueues_per_flush(&self) -> usize {
        self.subqueues_per_flush
    }

    /// `⌈D / N⌉`.
    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }
}

impl std::ops::Deref for ValidatedConfig {
    type Target = GritConfig;

    fn deref(&self) -> &GritConfig {
        &self.raw
    }
}

/// Checks are applied in a fixed order (counts, ordering, divisibility,
/// real ranges) so that each invalid input maps to exactly one error.
pub fn validate_config(raw: GritConfig) -> Result<ValidatedConfig, ConfigError> {
    let counts = [
        ("batch_size", raw.batch_size),
        ("search_space", raw.search_space),
        ("queue_capacity", raw.queue_capacity),
        ("dataset_size", raw.dataset_size),
        ("embed_dim", raw.embed_dim),
    ];
    if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
        return Err(ConfigError::NonPositive(name));
    }

    let (n, m, l, d) = (raw.batch_size, raw.search_space, raw.queue_capacity, raw.dataset_size);
    if n > m {
        return Err(ConfigError::OrderingViolation(format!("batch_size {n} > search_space {m}")));
    }
    if m > l {
        return Err(ConfigError::OrderingViolation(format!("search_space {m} > queue_capacity {l}")));
    }
    if l > d {
        return Err(ConfigError::OrderingViolation(format!("queue_capacity {l} > dataset_size {d}")));
    }
    if d > u32::MAX as usize {
        return Err(ConfigError::OutOfRange { field: "dataset_size", value: d as f64 });
    }

    if raw.strict_divisibility {
        if m % n != 0 {
            return Err(ConfigError::DivisibilityViolation(format!(
                "search_space {m} is not a multiple of batch_size {n}"
            )));
        }
        if l % m != 0 {
            return Err(ConfigError::DivisibilityViolation(format!(
                "queue_capacity {l} is not a multiple of search_space {m}"
            )));
        }
    }

    if !(raw.temperature > 0.0 && raw.temperature.is_finite()) {
        return Err(ConfigError::OutOfRange { field: "temperature", value: raw.temperature });
    }
    if !(raw.lambda_cons >= 0.0 && raw.lambda_cons.is_finite()) {
        return Err(ConfigError::OutOfRange { field: "lambda_cons", value: raw.lambda_cons });
    }
    if !(0.0..=1.0).contains(&raw.mask_prob) {
        return Err(ConfigError::OutOfRange { field: "mask_prob", value: raw.mask_prob });
    }

    Ok(ValidatedConfig {
        subqueues_per_flush: l / m,
        batches_per_epoch: d.div_ceil(n),
        raw,
    })
}
