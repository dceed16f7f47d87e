//! Run configuration read from a flat `key = value` TOML file.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::catalog::LoadOptions;
use crate::copurchase::IndexOptions;
use crate::evaluation::N_NEGATIVES;
use crate::llm::RetryPolicy;
use crate::recommender::DEFAULT_HISTORY_LIMIT;
use crate::retrieval::RetrievalConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Similar items per query item.
    pub k: usize,
    /// Items sampled into each summary.
    pub n: usize,
    pub use_sim_items: bool,
    pub use_cofreq_weights: bool,
    pub seed: u64,
    pub history_limit: usize,
    pub eval_users: usize,
    pub negatives: usize,
    pub model: String,
    pub embedding_model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub retry_base_ms: u64,
    pub max_in_flight: usize,
    pub min_user_interactions: usize,
    pub pair_budget: u64,
}

impl Default for Config {
    fn default() -> Self {
        let retrieval = RetrievalConfig::default();
        Self {
            k: retrieval.k,
            n: retrieval.n,
            use_sim_items: retrieval.use_sim_items,
            use_cofreq_weights: retrieval.use_cofreq_weights,
            seed: 0,
            history_limit: DEFAULT_HISTORY_LIMIT,
            eval_users: 1_000,
            negatives: N_NEGATIVES,
            model: "gpt-4.1-mini".into(),
            embedding_model: "text-embedding-3-small".into(),
            timeout_secs: 60,
            max_retries: 4,
            retry_base_ms: 500,
            max_in_flight: 8,
            min_user_interactions: 0,
            pair_budget: IndexOptions::default().pair_budget,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.display().to_string(),
            message,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k,
            n: self.n,
            use_sim_items: self.use_sim_items,
            use_cofreq_weights: self.use_cofreq_weights,
            rng_seed: self.seed,
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            min_user_interactions: self.min_user_interactions,
        }
    }

    pub fn index_options(&self) -> IndexOptions {
        IndexOptions {
            pair_budget: self.pair_budget,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_millis(self.retry_base_ms),
            max_delay: Duration::from_secs(30),
        }
    }
}
