//! Co-purchase retrieval and LLM item summaries for LLM-based next-item ranking.
//!
//! For every item shown to the ranking LLM (history items and candidates),
//! related items are retrieved from co-purchase statistics, expanded through
//! text-similar items, sampled in proportion to co-purchase frequency and
//! summarized by an LLM. The summary is appended to the item description in
//! the ranking prompt.

pub mod catalog;
pub mod cli;
pub mod config;
pub mod copurchase;
pub mod embedding;
pub mod evaluation;
pub mod llm;
pub mod mock;
pub mod pipeline;
pub mod recommender;
pub mod retrieval;
pub mod summarizer;
mod util;

pub use catalog::{leave_one_out, load_catalog, load_items, Catalog, EvalSplit, Item, ItemId, PurchaseHistory, UserId};
pub use config::Config;
pub use copurchase::{build_index, CoPurchaseIndex};
pub use embedding::{load_embeddings, EmbeddingStore, SimilarSet};
pub use evaluation::{make_cold_start, CandidateSet, ColdStartSplit, EvalReport};
pub use llm::{LlmClient, LlmRequest, LlmResponse};
pub use pipeline::{ItemRagPipeline, Mode};
pub use retrieval::{RetrievalConfig, RetrievalEngine, RetrievalResult};
pub use summarizer::{CoPurchaseSummary, SummaryCache};
