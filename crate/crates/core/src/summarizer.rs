//! LLM summaries of an item's retrieved co-purchased items, cached per
//! `(item, config hash)` so every user shares them.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::catalog::{Item, ItemId};
use crate::llm::{LlmClient, LlmError, LlmRequest};
use crate::util::{jsonl_lines, short_hash};

pub const SUMMARY_TEMPLATE_V1: &str = "summary-v1";
pub const MAX_SUMMARY_CHARS: usize = 1_000;
pub const SUMMARY_MAX_TOKENS: u32 = 200;
const SUMMARY_SYSTEM: &str = "You are a helpful e-commerce analyst.";
const SUMMARY_PREAMBLE: &str = "The following products are frequently purchased together with the product";
const TRANSPORT_ATTEMPTS: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum SummaryError {
    #[error("unsupported summary template version {0:?}")]
    UnknownTemplate(String),
    #[error("summarizing {item:?} failed: {source}")]
    Llm {
        item: ItemId,
        #[source]
        source: LlmError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoPurchaseSummary {
    #[serde(rename = "item_id")]
    pub item: ItemId,
    #[serde(rename = "summary")]
    pub text: String,
    pub source_items: Vec<ItemId>,
    pub config_hash: String,
    pub created_at: i64,
}

impl CoPurchaseSummary {
    pub fn empty(item: ItemId, config_hash: impl Into<String>) -> Self {
        Self {
            item,
            text: String::new(),
            source_items: Vec::new(),
            config_hash: config_hash.into(),
            created_at: now_secs(),
        }
    }

    /// Empty summaries mean "no augmentation".
    pub fn is_empty_sentinel(&self) -> bool {
        self.text.is_empty()
    }
}

fn now_secs() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Binds summaries to the retrieval settings, template and model that
/// produced them.
pub fn summary_config_hash(retrieval_hash: &str, template_version: &str, model_tag: &str) -> String {
    short_hash(format!("{retrieval_hash}\n{template_version}\n{model_tag}").as_bytes())
}

/// Renders the v1 summary prompt.
pub fn render_summary_prompt(query_title: &str, retrieved_titles: &[&str]) -> String {
    let mut out = format!("{SUMMARY_PREAMBLE} \"{query_title}\".\nCo-purchased products:\n");
    for title in retrieved_titles {
        out.push_str("- ");
        out.push_str(title);
        out.push('\n');
    }
    out.push_str(&format!(
        "Summarize, in at most 80 words, what kinds of products are commonly bought together with \"{query_title}\" and why."
    ));
    out
}

/// Parsed form of a v1 summary prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryPrompt {
    pub query_title: String,
    pub titles: Vec<String>,
}

/// Inverse of [`render_summary_prompt`] for prompts whose titles contain no
/// line breaks.
pub fn parse_summary_prompt(prompt: &str) -> Option<SummaryPrompt> {
    let mut lines = prompt.lines();
    let first = lines.next()?;
    let query_title = first.strip_prefix(SUMMARY_PREAMBLE)?.strip_prefix(" \"")?.strip_suffix("\".")?;
    if lines.next()? != "Co-purchased products:" {
        return None;
    }
    let titles = lines.filter_map(|l| l.strip_prefix("- ")).map(str::to_string).collect();
    Some(SummaryPrompt {
        query_title: query_title.to_string(),
        titles,
    })
}

fn truncate_chars(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

/// Summarizes `retrieved` for `item`. An empty retrieval short-circuits to
/// the empty sentinel without calling the LLM.
pub fn summarize(
    item: &Item,
    retrieved: &[&Item],
    llm: &dyn LlmClient,
    template_version: &str,
    config_hash: &str,
) -> Result<CoPurchaseSummary, SummaryError> {
    if template_version != SUMMARY_TEMPLATE_V1 {
        return Err(SummaryError::UnknownTemplate(template_version.to_string()));
    }
    if retrieved.is_empty() {
        return Ok(CoPurchaseSummary::empty(item.id.clone(), config_hash));
    }
    let titles: Vec<&str> = retrieved.iter().map(|r| r.description.as_str()).collect();
    let prompt = render_summary_prompt(&item.description, &titles);
    let req = LlmRequest::new(llm.model_tag(), SUMMARY_SYSTEM, prompt, SUMMARY_MAX_TOKENS);

    let mut attempt = 1;
    let response = loop {
        match llm.complete(&req) {
            Ok(r) => break r,
            Err(err) if err.is_retryable() && attempt < TRANSPORT_ATTEMPTS => {
                tracing::warn!(item = %item.id, %err, attempt, "summary request failed, retrying");
                attempt += 1;
            }
            Err(source) => {
                return Err(SummaryError::Llm {
                    item: item.id.clone(),
                    source,
                })
            }
        }
    };

    let text = truncate_chars(response.text.trim(), MAX_SUMMARY_CHARS).to_string();
    if text.is_empty() {
        tracing::warn!(item = %item.id, "LLM returned an empty summary");
        return Ok(CoPurchaseSummary::empty(item.id.clone(), config_hash));
    }
    Ok(CoPurchaseSummary {
        item: item.id.clone(),
        text,
        source_items: retrieved.iter().map(|r| r.id.clone()).collect(),
        config_hash: config_hash.to_string(),
        created_at: now_secs(),
    })
}

type Slot = Arc<Mutex<Option<CoPurchaseSummary>>>;

/// Summary cache keyed by `(item, config hash)`, optionally persisted as an
/// append-only JSONL file.
///
/// Concurrent misses on one key coalesce: the first caller computes while the
/// others wait on the key's slot.
#[derive(Default)]
pub struct SummaryCache {
    slots: Mutex<HashMap<(ItemId, String), Slot>>,
    file: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
    persist_failed: AtomicBool,
}

impl SummaryCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads existing entries from `path` and appends new ones to it. If the
    /// file cannot be opened for writing the cache stays in memory only.
    pub fn open(path: &Path) -> Self {
        let mut slots = HashMap::new();
        if path.is_file() {
            match jsonl_lines(path) {
                Ok(lines) => {
                    for entry in lines {
                        let (n, line) = match entry {
                            Ok(l) => l,
                            Err(err) => {
                                tracing::warn!(path = %path.display(), %err, "stopped reading summary cache");
                                break;
                            }
                        };
                        match serde_json::from_str::<CoPurchaseSummary>(&line) {
                            Ok(s) => {
                                slots.insert((s.item.clone(), s.config_hash.clone()), Arc::new(Mutex::new(Some(s))));
                            }
                            Err(err) => tracing::warn!(path = %path.display(), line = n, %err, "skipping unreadable cache entry"),
                        }
                    }
                }
                Err(err) => tracing::warn!(path = %path.display(), %err, "could not read summary cache"),
            }
        }
        let file = match OpenOptions::new().create(true).append(true).open(path) {
            Ok(f) => Some(Mutex::new(BufWriter::new(f))),
            Err(err) => {
                tracing::warn!(path = %path.display(), %err, "summary cache is not persistent");
                None
            }
        };
        Self {
            slots: Mutex::new(slots),
            file,
            path: Some(path.to_path_buf()),
            persist_failed: AtomicBool::new(false),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        let slots = self.slots.lock().expect("cache poisoned");
        slots.values().filter(|s| s.lock().expect("slot poisoned").is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, item: &ItemId, cfg_hash: &str) -> Option<CoPurchaseSummary> {
        let slot = self.slots.lock().expect("cache poisoned").get(&(item.clone(), cfg_hash.to_string())).cloned()?;
        let value = slot.lock().expect("slot poisoned").clone();
        value
    }

    fn slot(&self, item: &ItemId, cfg_hash: &str) -> Slot {
        self.slots
            .lock()
            .expect("cache poisoned")
            .entry((item.clone(), cfg_hash.to_string()))
            .or_default()
            .clone()
    }

    fn persist(&self, summary: &CoPurchaseSummary) {
        let Some(file) = &self.file else { return };
        if self.persist_failed.load(Ordering::Relaxed) {
            return;
        }
        let mut out = file.lock().expect("cache writer poisoned");
        let result = serde_json::to_string(summary)
            .map_err(std::io::Error::from)
            .and_then(|line| writeln!(out, "{line}"))
            .and_then(|_| out.flush());
        if let Err(err) = result {
            tracing::warn!(%err, "summary cache write failed, continuing without persistence");
            self.persist_failed.store(true, Ordering::Relaxed);
        }
    }

    /// Returns the cached summary or computes, stores and returns it.
    /// `compute` runs at most once per key across all callers, unless it fails.
    pub fn get_or_compute<F>(&self, item: &ItemId, cfg_hash: &str, compute: F) -> Result<CoPurchaseSummary, SummaryError>
    where
        F: FnOnce() -> Result<CoPurchaseSummary, SummaryError>,
    {
        let slot = self.slot(item, cfg_hash);
        let mut guard = slot.lock().expect("slot poisoned");
        if let Some(hit) = guard.as_ref() {
            return Ok(hit.clone());
        }
        let mut fresh = compute()?;
        fresh.config_hash = cfg_hash.to_string();
        self.persist(&fresh);
        *guard = Some(fresh.clone());
        Ok(fresh)
    }
}

/// Cached [`summarize`].
pub fn get_or_summarize(
    cache: &SummaryCache,
    item: &Item,
    retrieved: &[&Item],
    llm: &dyn LlmClient,
    cfg_hash: &str,
) -> Result<CoPurchaseSummary, SummaryError> {
    cache.get_or_compute(&item.id, cfg_hash, || summarize(item, retrieved, llm, SUMMARY_TEMPLATE_V1, cfg_hash))
}
