//! Deterministic, network-free [`LlmClient`] driven by a JSON script.
//!
//! Dispatch order for a request: exact-match table, summary rule (for
//! summary prompts), ranking rule (for ranking prompts), generic text rule,
//! fallback text. A request matching none of these is an error.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::llm::{LlmClient, LlmError, LlmRequest, LlmResponse, Usage};
use crate::recommender::{parse_ranking_prompt, AUGMENT_SEPARATOR};
use crate::summarizer::parse_summary_prompt;

/// Joins echoed titles in summaries produced by [`SummaryRule::EchoTitles`].
pub const ECHO_TITLE_SEPARATOR: &str = "; ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SummaryRule {
    /// The first `max` retrieved titles, joined by `"; "`.
    EchoTitles { max: usize },
    Constant { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RankingRule {
    /// Labels in presented order.
    Identity,
    Reverse,
    /// Sort candidates by a hidden score keyed on their base description
    /// (unknown descriptions score 0); ties keep presented order.
    Oracle { scores: BTreeMap<String, f64> },
    /// Score each candidate by how many history items its echoed summary
    /// names, plus how many history summaries name it.
    CoPurchaseOverlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextRule {
    Echo,
    Uppercase,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub model_tag: Option<String>,
    #[serde(default)]
    pub exact: BTreeMap<String, String>,
    #[serde(default)]
    pub summary: Option<SummaryRule>,
    #[serde(default)]
    pub ranking: Option<RankingRule>,
    #[serde(default)]
    pub rule: Option<TextRule>,
    #[serde(default)]
    pub fallback: Option<String>,
}

#[derive(Debug)]
pub struct MockLlm {
    script: MockScript,
    model_tag: String,
    calls: AtomicUsize,
}

fn split_rendered(rendered: &str) -> (&str, Option<&str>) {
    match rendered.split_once(AUGMENT_SEPARATOR) {
        Some((base, summary)) => (base, Some(summary)),
        None => (rendered, None),
    }
}

fn echoed_titles(summary: Option<&str>) -> HashSet<&str> {
    summary.map(|s| s.split(ECHO_TITLE_SEPARATOR).collect()).unwrap_or_default()
}

fn labels_by_score(labels: &[char], scores: &[f64]) -> String {
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(CmpOrdering::Equal));
    idx.iter().map(|&i| labels[i].to_string()).collect::<Vec<_>>().join(", ")
}

impl MockLlm {
    pub fn new(script: MockScript) -> Self {
        let model_tag = script.model_tag.clone().unwrap_or_else(|| "mock".to_string());
        Self {
            script,
            model_tag,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        let script = serde_json::from_str(&text).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    /// Total `complete` calls so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn summary_reply(&self, prompt: &str) -> Option<String> {
        let rule = self.script.summary.as_ref()?;
        let parsed = parse_summary_prompt(prompt)?;
        Some(match rule {
            SummaryRule::EchoTitles { max } => parsed
                .titles
                .iter()
                .take(*max)
                .map(String::as_str)
                .collect::<Vec<_>>()
                .join(ECHO_TITLE_SEPARATOR),
            SummaryRule::Constant { text } => text.clone(),
        })
    }

    fn ranking_reply(&self, prompt: &str) -> Option<String> {
        let rule = self.script.ranking.as_ref()?;
        let parsed = parse_ranking_prompt(prompt)?;
        let labels: Vec<char> = parsed.candidates.iter().map(|(c, _)| *c).collect();
        Some(match rule {
            RankingRule::Identity => labels_by_score(&labels, &vec![0.0; labels.len()]),
            RankingRule::Reverse => {
                labels.iter().rev().map(char::to_string).collect::<Vec<_>>().join(", ")
            }
            RankingRule::Oracle { scores } => {
                let s: Vec<f64> = parsed
                    .candidates
                    .iter()
                    .map(|(_, text)| scores.get(split_rendered(text).0).copied().unwrap_or(0.0))
                    .collect();
                labels_by_score(&labels, &s)
            }
            RankingRule::CoPurchaseOverlap => {
                let history: Vec<(&str, HashSet<&str>)> = parsed
                    .history
                    .iter()
                    .map(|h| {
                        let (base, summary) = split_rendered(h);
                        (base, echoed_titles(summary))
                    })
                    .collect();
                let s: Vec<f64> = parsed
                    .candidates
                    .iter()
                    .map(|(_, text)| {
                        let (base, summary) = split_rendered(text);
                        let named = echoed_titles(summary);
                        let forward = history.iter().filter(|(h, _)| named.contains(h)).count();
                        let backward = history.iter().filter(|(_, titles)| titles.contains(base)).count();
                        (forward + backward) as f64
                    })
                    .collect();
                labels_by_score(&labels, &s)
            }
        })
    }
}

impl LlmClient for MockLlm {
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self
            .script
            .exact
            .get(&req.user)
            .cloned()
            .or_else(|| self.summary_reply(&req.user))
            .or_else(|| self.ranking_reply(&req.user))
            .or_else(|| {
                self.script.rule.as_ref().map(|rule| match rule {
                    TextRule::Echo => req.user.clone(),
                    TextRule::Uppercase => req.user.to_uppercase(),
                })
            })
            .or_else(|| self.script.fallback.clone())
            .ok_or_else(|| LlmError::Mock("no script entry matches the request".into()))?;
        let words = |s: &str| s.split_whitespace().count() as u64;
        Ok(LlmResponse {
            usage: Usage {
                prompt_tokens: words(&req.system) + words(&req.user),
                completion_tokens: words(&text),
            },
            text,
            latency_ms: 0,
        })
    }

    fn model_tag(&self) -> &str {
        &self.model_tag
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Item, ItemId, UserId};
    use crate::recommender::{build_ranking_prompt, AugmentedItem, RankingTask};
    use crate::summarizer::render_summary_prompt;

    fn req(user: &str) -> LlmRequest {
        LlmRequest::new("m", "", user, 16)
    }

    fn item(id: &str) -> Item {
        Item {
            id: ItemId::new(id),
            description: format!("Title {id}"),
        }
    }

    #[test]
    fn uppercase_rule_and_determinism() {
        let mock = MockLlm::new(MockScript {
            rule: Some(TextRule::Uppercase),
            ..Default::default()
        });
        let a = mock.complete(&req("rank")).unwrap();
        assert_eq!(a.text, "RANK");
        let b = mock.complete(&req("rank")).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn exact_table_wins_and_misses_error() {
        let mock = MockLlm::new(MockScript {
            exact: [("hello".to_string(), "world".to_string())].into(),
            ..Default::default()
        });
        assert_eq!(mock.complete(&req("hello")).unwrap().text, "world");
        assert!(matches!(mock.complete(&req("other")), Err(LlmError::Mock(_))));
    }

    #[test]
    fn echo_titles_summary() {
        let mock = MockLlm::new(MockScript {
            summary: Some(SummaryRule::EchoTitles { max: 3 }),
            ..Default::default()
        });
        let prompt = render_summary_prompt("Q", &["X", "Y", "Z", "W"]);
        assert_eq!(mock.complete(&req(&prompt)).unwrap().text, "X; Y; Z");
    }

    #[test]
    fn oracle_ranking() {
        let scores = [("Title c".to_string(), 2.0), ("Title a".to_string(), 1.0)].into();
        let mock = MockLlm::new(MockScript {
            ranking: Some(RankingRule::Oracle { scores }),
            ..Default::default()
        });
        let mut cands: Vec<AugmentedItem> = ["a", "b", "c"].iter().map(|i| AugmentedItem::plain(&item(i))).collect();
        cands[2].summary = Some("ignored by the oracle".into());
        let task = RankingTask::new(UserId::new("u"), vec![], cands, 30).unwrap();
        let prompt = build_ranking_prompt(&task).unwrap();
        assert_eq!(mock.complete(&req(&prompt)).unwrap().text, "C, A, B");
    }

    #[test]
    fn overlap_ranking_uses_summaries() {
        let mock = MockLlm::new(MockScript {
            ranking: Some(RankingRule::CoPurchaseOverlap),
            ..Default::default()
        });
        let mut history = vec![AugmentedItem::plain(&item("h"))];
        history[0].summary = Some("Title c; Title z".into());
        let mut cands: Vec<AugmentedItem> = ["a", "b", "c"].iter().map(|i| AugmentedItem::plain(&item(i))).collect();
        cands[1].summary = Some("Title h".into());
        let task = RankingTask::new(UserId::new("u"), history, cands, 30).unwrap();
        let prompt = build_ranking_prompt(&task).unwrap();
        // b names the history item, c is named by the history summary
        assert_eq!(mock.complete(&req(&prompt)).unwrap().text, "B, C, A");
    }

    #[test]
    fn script_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mock.json");
        std::fs::write(
            &path,
            r#"{"model_tag": "mock-v1", "summary": {"kind": "echo_titles", "max": 2}, "ranking": {"kind": "identity"}}"#,
        )
        .unwrap();
        let mock = MockLlm::from_file(&path).unwrap();
        assert_eq!(mock.model_tag(), "mock-v1");
        std::fs::write(&path, r#"{"unknown": 1}"#).unwrap();
        assert!(MockLlm::from_file(&path).is_err());
    }
}
