//! End-to-end ranking for one user: retrieve and summarize co-purchases for
//! every history item and candidate, assemble the prompt, rank.

use rayon::prelude::*;

use crate::catalog::{Catalog, ItemId};
use crate::copurchase::CoPurchaseIndex;
use crate::embedding::EmbeddingStore;
use crate::evaluation::CandidateSet;
use crate::llm::LlmClient;
use crate::recommender::{augment, rank, AugmentedItem, RankError, RankedList, RankingTask, DEFAULT_HISTORY_LIMIT};
use crate::retrieval::{RetrievalConfig, RetrievalEngine, RetrievalError};
use crate::summarizer::{summarize, summary_config_hash, CoPurchaseSummary, SummaryCache, SummaryError, SUMMARY_TEMPLATE_V1};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("item {0:?} is not in the catalog")]
    UnknownItem(ItemId),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Summary(#[from] SummaryError),
    #[error(transparent)]
    Rank(#[from] RankError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Plain descriptions only.
    ZeroShot,
    /// Descriptions with appended co-purchase summaries.
    ItemRag,
}

pub struct ItemRagPipeline<'a> {
    train: &'a Catalog,
    engine: RetrievalEngine<'a>,
    cache: &'a SummaryCache,
    llm: &'a dyn LlmClient,
    summary_hash: String,
    history_limit: usize,
    mode: Mode,
}

impl<'a> ItemRagPipeline<'a> {
    pub fn new(
        train: &'a Catalog,
        index: &'a CoPurchaseIndex,
        store: Option<&'a EmbeddingStore>,
        retrieval: RetrievalConfig,
        cache: &'a SummaryCache,
        llm: &'a dyn LlmClient,
    ) -> Result<Self, PipelineError> {
        let summary_hash = summary_config_hash(&retrieval.config_hash(), SUMMARY_TEMPLATE_V1, llm.model_tag());
        Ok(Self {
            train,
            engine: RetrievalEngine::new(index, store, retrieval)?,
            cache,
            llm,
            summary_hash,
            history_limit: DEFAULT_HISTORY_LIMIT,
            mode: Mode::ItemRag,
        })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_history_limit(mut self, limit: usize) -> Self {
        self.history_limit = limit;
        self
    }

    pub fn summary_hash(&self) -> &str {
        &self.summary_hash
    }

    pub fn engine(&self) -> &RetrievalEngine<'a> {
        &self.engine
    }

    /// Cached co-purchase summary for `item`.
    pub fn summary(&self, item: &ItemId) -> Result<CoPurchaseSummary, PipelineError> {
        let query = self.train.item(item.as_str()).ok_or_else(|| PipelineError::UnknownItem(item.clone()))?;
        let summary = self.cache.get_or_compute(item, &self.summary_hash, || {
            let retrieved = self.engine.retrieve(item);
            let items: Vec<_> = retrieved.items().filter_map(|id| self.train.item(id.as_str())).collect();
            summarize(query, &items, self.llm, SUMMARY_TEMPLATE_V1, &self.summary_hash)
        })?;
        Ok(summary)
    }

    /// Summaries for many items, in input order.
    pub fn summarize_all(&self, items: &[ItemId]) -> Result<Vec<CoPurchaseSummary>, PipelineError> {
        items.par_iter().map(|i| self.summary(i)).collect()
    }

    fn augmented(&self, id: &ItemId) -> Result<AugmentedItem, PipelineError> {
        let item = self.train.item(id.as_str()).ok_or_else(|| PipelineError::UnknownItem(id.clone()))?;
        Ok(match self.mode {
            Mode::ZeroShot => augment(item, None),
            Mode::ItemRag => augment(item, Some(&self.summary(id)?)),
        })
    }

    pub fn task_for(&self, candidates: &CandidateSet) -> Result<RankingTask, PipelineError> {
        let history = self
            .train
            .history(candidates.user.as_str())
            .map(|h| h.sequence.as_slice())
            .unwrap_or_default();
        let recent = &history[history.len().saturating_sub(self.history_limit)..];
        let history = recent.iter().map(|i| self.augmented(i)).collect::<Result<Vec<_>, _>>()?;
        let cands = candidates
            .presented_order
            .iter()
            .map(|i| self.augmented(i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RankingTask::new(candidates.user.clone(), history, cands, self.history_limit)?)
    }

    pub fn rank(&self, candidates: &CandidateSet) -> Result<RankedList, PipelineError> {
        let task = self.task_for(candidates)?;
        Ok(rank(&task, self.llm)?)
    }
}
