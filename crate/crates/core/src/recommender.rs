//! Ranking prompt assembly, the LLM ranking call and response parsing.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::catalog::{Item, ItemId, UserId};
use crate::llm::{LlmClient, LlmError, LlmRequest};
use crate::summarizer::CoPurchaseSummary;

pub const AUGMENT_SEPARATOR: &str = " | Frequently co-purchased: ";
pub const DEFAULT_HISTORY_LIMIT: usize = 30;
pub const MAX_CANDIDATES: usize = 26;
pub const RANKING_MAX_TOKENS: u32 = 100;

const PROMPT_HEAD: &str =
    "You are a recommender system. A user purchased the following products in chronological order:";
const PROMPT_TAIL: &str =
    "Answer with only the labels in ranked order, comma-separated (e.g., \"B, A, D, C, E, F, G, H, I, J\").";

#[derive(Debug, thiserror::Error)]
pub enum RankError {
    #[error("{0} candidates exceed the {MAX_CANDIDATES}-letter label alphabet")]
    TooManyCandidates(usize),
    #[error("ranking task has no candidates")]
    NoCandidates,
    #[error("candidate {0:?} appears more than once")]
    DuplicateCandidate(ItemId),
    #[error("could not parse a ranking from response {raw:?}")]
    Unparseable { raw: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// An item as shown to the ranker: its description, optionally followed by
/// its co-purchase summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedItem {
    pub item: ItemId,
    pub base_description: String,
    pub summary: Option<String>,
}

/// Attaches a summary to an item. Missing or empty summaries leave the plain
/// description.
pub fn augment(item: &Item, summary: Option<&CoPurchaseSummary>) -> AugmentedItem {
    AugmentedItem {
        item: item.id.clone(),
        base_description: item.description.clone(),
        summary: summary.filter(|s| !s.is_empty_sentinel()).map(|s| s.text.clone()),
    }
}

fn one_line(text: &str) -> String {
    if text.contains(['\n', '\r']) {
        text.split(['\n', '\r']).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ")
    } else {
        text.to_string()
    }
}

impl AugmentedItem {
    pub fn plain(item: &Item) -> Self {
        augment(item, None)
    }

    pub fn rendered(&self) -> String {
        match &self.summary {
            Some(summary) => format!("{}{AUGMENT_SEPARATOR}{}", one_line(&self.base_description), one_line(summary)),
            None => one_line(&self.base_description),
        }
    }
}

pub fn label(position: usize) -> char {
    debug_assert!(position < MAX_CANDIDATES);
    (b'A' + position as u8) as char
}

fn label_index(c: char, n: usize) -> Option<usize> {
    let idx = (c as u32).checked_sub('A' as u32)? as usize;
    (idx < n).then_some(idx)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingTask {
    pub user: UserId,
    pub history: Vec<AugmentedItem>,
    pub candidates: Vec<AugmentedItem>,
}

impl RankingTask {
    /// Keeps the `history_limit` most recent history items and validates the
    /// candidate list.
    pub fn new(
        user: UserId,
        mut history: Vec<AugmentedItem>,
        candidates: Vec<AugmentedItem>,
        history_limit: usize,
    ) -> Result<Self, RankError> {
        if candidates.is_empty() {
            return Err(RankError::NoCandidates);
        }
        if candidates.len() > MAX_CANDIDATES {
            return Err(RankError::TooManyCandidates(candidates.len()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = candidates.iter().find(|c| !seen.insert(&c.item)) {
            return Err(RankError::DuplicateCandidate(dup.item.clone()));
        }
        if history.len() > history_limit {
            history.drain(..history.len() - history_limit);
        }
        Ok(Self {
            user,
            history,
            candidates,
        })
    }

    /// Candidate item for a label letter.
    pub fn candidate_for(&self, label: char) -> Option<&ItemId> {
        label_index(label, self.candidates.len()).map(|i| &self.candidates[i].item)
    }
}

/// Renders the ranking prompt. Candidates keep the order they were given in.
pub fn build_ranking_prompt(task: &RankingTask) -> Result<String, RankError> {
    if task.candidates.len() > MAX_CANDIDATES {
        return Err(RankError::TooManyCandidates(task.candidates.len()));
    }
    let mut out = String::from(PROMPT_HEAD);
    out.push('\n');
    for (pos, item) in task.history.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", pos + 1, item.rendered()));
    }
    out.push_str(&format!(
        "Rank ALL of the following {} candidate products from most to least likely to be the user's next purchase.\n",
        task.candidates.len()
    ));
    for (pos, item) in task.candidates.iter().enumerate() {
        out.push_str(&format!("{}) {}\n", label(pos), item.rendered()));
    }
    out.push_str(PROMPT_TAIL);
    Ok(out)
}

/// Rendered history and candidate lines recovered from a ranking prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingPrompt {
    pub history: Vec<String>,
    pub candidates: Vec<(char, String)>,
}

/// Inverse of [`build_ranking_prompt`].
pub fn parse_ranking_prompt(prompt: &str) -> Option<RankingPrompt> {
    let mut lines = prompt.lines();
    if lines.next()? != PROMPT_HEAD {
        return None;
    }
    let mut history = Vec::new();
    let mut candidates = Vec::new();
    let mut in_candidates = false;
    for line in lines {
        if line == PROMPT_TAIL {
            return Some(RankingPrompt { history, candidates });
        }
        if !in_candidates && line.starts_with("Rank ALL of the following ") {
            in_candidates = true;
            continue;
        }
        if in_candidates {
            let (lbl, text) = line.split_once(") ")?;
            let mut chars = lbl.chars();
            let c = chars.next()?;
            if chars.next().is_some() {
                return None;
            }
            candidates.push((c, text.to_string()));
        } else {
            let (_, text) = line.split_once(". ")?;
            history.push(text.to_string());
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRanking {
    /// Candidate positions, best first.
    pub order: Vec<usize>,
    /// True when labels had to be extracted or filled in.
    pub repaired: bool,
}

fn complete_permutation(labels: &[usize], n: usize) -> bool {
    if labels.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    labels.iter().all(|&l| !std::mem::replace(&mut seen[l], true))
}

fn single_labels<'a>(tokens: impl Iterator<Item = &'a str>, n: usize) -> Option<Vec<usize>> {
    tokens
        .map(|t| {
            let mut chars = t.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => label_index(c, n),
                _ => None,
            }
        })
        .collect()
}

fn label_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"\b([A-Z])\b").expect("valid regex"))
}

/// Parses a ranking over `n` labelled candidates.
///
/// Tried in order: comma-separated labels, whitespace-separated labels, then
/// every standalone label letter in order of first appearance with missing
/// labels appended in candidate order.
pub fn parse_ranking(raw: &str, n: usize) -> Result<ParsedRanking, RankError> {
    let trimmed = raw.trim();
    if let Some(order) = single_labels(trimmed.split(',').map(str::trim), n) {
        if complete_permutation(&order, n) {
            return Ok(ParsedRanking { order, repaired: false });
        }
    }
    let punct: &[char] = &[',', '.', ';', ':', ')', '(', '"', '\'', '>', '[', ']'];
    let tokens = trimmed.split_whitespace().map(|t| t.trim_matches(punct)).filter(|t| !t.is_empty());
    if let Some(order) = single_labels(tokens, n) {
        if complete_permutation(&order, n) {
            return Ok(ParsedRanking { order, repaired: false });
        }
    }

    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for cap in label_pattern().captures_iter(trimmed) {
        let c = cap[1].chars().next().expect("one char");
        if let Some(idx) = label_index(c, n) {
            if !std::mem::replace(&mut seen[idx], true) {
                order.push(idx);
            }
        }
    }
    if order.is_empty() {
        return Err(RankError::Unparseable { raw: raw.to_string() });
    }
    order.extend((0..n).filter(|&i| !seen[i]));
    tracing::warn!(response = raw, "ranking response repaired");
    Ok(ParsedRanking { order, repaired: true })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub order: Vec<ItemId>,
    pub raw_response: String,
    pub repaired: bool,
}

impl RankedList {
    /// 1-based position of `item`.
    pub fn rank_of(&self, item: &ItemId) -> Option<usize> {
        self.order.iter().position(|i| i == item).map(|p| p + 1)
    }
}

/// One LLM call ranking the task's candidates.
pub fn rank(task: &RankingTask, llm: &dyn LlmClient) -> Result<RankedList, RankError> {
    let prompt = build_ranking_prompt(task)?;
    let req = LlmRequest::new(llm.model_tag(), "", prompt, RANKING_MAX_TOKENS);
    let response = llm.complete(&req)?;
    let parsed = parse_ranking(&response.text, task.candidates.len())?;
    Ok(RankedList {
        order: parsed.order.iter().map(|&i| task.candidates[i].item.clone()).collect(),
        raw_response: response.text,
        repaired: parsed.repaired,
    })
}

/// One line of the ranking dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub user_id: UserId,
    pub order: Vec<ItemId>,
    pub gt_rank: usize,
    pub raw: String,
}
