//! Retrieval pools, co-purchase sampling weights and seeded sampling of
//! relevant items for a query item.
//!
//! The pool for `i` is `N(i)` together with the neighbors of every item in
//! `T(i)`, minus `i` itself. Each pool member `j` is weighted by
//! `c_ij + mean_{q in T(i)} c_qj` and `N` members are drawn without
//! replacement with probability proportional to weight.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::ItemId;
use crate::copurchase::CoPurchaseIndex;
use crate::embedding::{EmbeddingStore, SimilarSet};
use crate::util::{derive_seed, short_hash};

/// Retrieval hyperparameters. The defaults (5 similar items, 50 samples)
/// follow the reference setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Number of text-similar items, `|T(i)|`.
    pub k: usize,
    /// Number of items sampled from the pool.
    pub n: usize,
    /// `false` restricts the pool to `N(i)` (the "without similar items" ablation).
    pub use_sim_items: bool,
    /// `false` samples uniformly from the pool (the "without co-purchase weights" ablation).
    pub use_cofreq_weights: bool,
    pub rng_seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n: 50,
            use_sim_items: true,
            use_cofreq_weights: true,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(&'static str),
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.n == 0 {
            return Err(RetrievalError::InvalidConfig("sample size n must be at least 1"));
        }
        Ok(())
    }

    /// Fingerprint of every field, used to key dumps and summaries.
    pub fn config_hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

/// A sampled item with its weight `w_ij`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedItem {
    pub item: ItemId,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: ItemId,
    pub pool_size: usize,
    pub sampled: Vec<WeightedItem>,
}

impl RetrievalResult {
    pub fn items(&self) -> impl Iterator<Item = &ItemId> {
        self.sampled.iter().map(|w| &w.item)
    }
}

/// P(i). With `use_sim_items` off only `N(i)` contributes.
pub fn build_pool(
    i: &ItemId,
    index: &CoPurchaseIndex,
    similar: &SimilarSet,
    cfg: &RetrievalConfig,
) -> BTreeSet<ItemId> {
    debug_assert!(similar.is_empty() || &similar.query == i);
    let mut pool: BTreeSet<ItemId> = index.neighbors(i).cloned().collect();
    if cfg.use_sim_items {
        for q in similar.items() {
            pool.extend(index.neighbors(q).cloned());
        }
    }
    pool.remove(i);
    pool
}

/// `w_ij = c_ij + (1/|T(i)|) Σ_{q ∈ T(i)} c_qj`, with the mean term taken as
/// 0 when `T(i)` is empty. `c_jj` counts as 0 when `j` is itself in `T(i)`.
pub fn sampling_weight(i: &ItemId, j: &ItemId, index: &CoPurchaseIndex, similar: &SimilarSet) -> f64 {
    let direct = f64::from(index.count(i, j));
    if similar.is_empty() {
        return direct;
    }
    let total: u64 = similar.items().map(|q| u64::from(index.count(q, j))).sum();
    direct + total as f64 / similar.len() as f64
}

/// Per-query RNG stream so results do not depend on scheduling.
pub fn query_rng(seed: u64, query: &ItemId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, "retrieval", query.as_str()))
}

/// Draws `min(n, |pool|)` distinct items. Pools no larger than `n` are
/// returned whole in id order; otherwise items are drawn one at a time in
/// proportion to their remaining weight (uniformly when
/// `use_cofreq_weights` is off).
pub fn sample_retrieval<R: Rng + ?Sized>(
    i: &ItemId,
    pool: &BTreeSet<ItemId>,
    weights: &BTreeMap<ItemId, f64>,
    cfg: &RetrievalConfig,
    rng: &mut R,
) -> RetrievalResult {
    let weight_of = |j: &ItemId| weights.get(j).copied().unwrap_or(1.0);
    let pool_size = pool.len();
    if pool_size <= cfg.n {
        return RetrievalResult {
            query: i.clone(),
            pool_size,
            sampled: pool
                .iter()
                .map(|j| WeightedItem {
                    item: j.clone(),
                    w: weight_of(j),
                })
                .collect(),
        };
    }

    let mut remaining: Vec<(&ItemId, f64)> = pool
        .iter()
        .map(|j| {
            let draw_weight = if cfg.use_cofreq_weights { weight_of(j) } else { 1.0 };
            debug_assert!(draw_weight > 0.0, "pool member {j} has non-positive weight");
            (j, draw_weight)
        })
        .collect();
    let mut sampled = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let total: f64 = remaining.iter().map(|(_, w)| w).sum();
        let mut target = rng.random::<f64>() * total;
        // falls back to the last item if rounding leaves `target` past the end
        let mut pick = remaining.len() - 1;
        for (pos, (_, w)) in remaining.iter().enumerate() {
            if target < *w {
                pick = pos;
                break;
            }
            target -= w;
        }
        let (item, _) = remaining.swap_remove(pick);
        sampled.push(WeightedItem {
            item: item.clone(),
            w: weight_of(item),
        });
    }
    RetrievalResult {
        query: i.clone(),
        pool_size,
        sampled,
    }
}

/// Retrieval over a fixed index, embedding store and configuration.
pub struct RetrievalEngine<'a> {
    index: &'a CoPurchaseIndex,
    store: Option<&'a EmbeddingStore>,
    cfg: RetrievalConfig,
}

impl<'a> RetrievalEngine<'a> {
    pub fn new(
        index: &'a CoPurchaseIndex,
        store: Option<&'a EmbeddingStore>,
        cfg: RetrievalConfig,
    ) -> Result<Self, RetrievalError> {
        cfg.validate()?;
        Ok(Self { index, store, cfg })
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.cfg
    }

    /// T(i) under the current config; empty when similar items are disabled
    /// or the item has no embedding.
    pub fn similar(&self, i: &ItemId) -> SimilarSet {
        if !self.cfg.use_sim_items || self.cfg.k == 0 {
            return SimilarSet::empty(i.clone());
        }
        match self.store.map(|s| s.top_k_similar(i, self.cfg.k)) {
            Some(Ok(set)) => set,
            Some(Err(err)) => {
                tracing::warn!(item = %i, %err, "no similar items available");
                SimilarSet::empty(i.clone())
            }
            None => SimilarSet::empty(i.clone()),
        }
    }

    pub fn retrieve(&self, i: &ItemId) -> RetrievalResult {
        let similar = self.similar(i);
        let pool = build_pool(i, self.index, &similar, &self.cfg);
        let weights: BTreeMap<ItemId, f64> = pool
            .iter()
            .map(|j| (j.clone(), sampling_weight(i, j, self.index, &similar)))
            .collect();
        let mut rng = query_rng(self.cfg.rng_seed, i);
        sample_retrieval(i, &pool, &weights, &self.cfg, &mut rng)
    }

    /// Retrieves for many queries in parallel; output follows input order.
    pub fn retrieve_all(&self, queries: &[ItemId]) -> Vec<RetrievalResult> {
        queries.par_iter().map(|q| self.retrieve(q)).collect()
    }
}

#[derive(Serialize)]
struct DumpLine<'a> {
    query: &'a ItemId,
    pool_size: usize,
    sampled: &'a [WeightedItem],
    seed: u64,
    config_hash: &'a str,
}

/// Retrieval dump line as read back from disk.
#[derive(Debug, Clone, Deserialize)]
pub struct RetrievalDumpRecord {
    pub query: ItemId,
    pub pool_size: usize,
    pub sampled: Vec<WeightedItem>,
    pub seed: u64,
    pub config_hash: String,
}

pub fn write_retrieval_dump(path: &Path, cfg: &RetrievalConfig, results: &[RetrievalResult]) -> io::Result<()> {
    let hash = cfg.config_hash();
    let mut out = BufWriter::new(File::create(path)?);
    for r in results {
        let line = DumpLine {
            query: &r.query,
            pool_size: r.pool_size,
            sampled: &r.sampled,
            seed: cfg.rng_seed,
            config_hash: &hash,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()
}

pub fn read_retrieval_dump(path: &Path) -> io::Result<Vec<RetrievalDumpRecord>> {
    let mut records = Vec::new();
    for entry in crate::util::jsonl_lines(path)? {
        let (_, line) = entry?;
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
