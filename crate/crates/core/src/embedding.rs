//! Item text embeddings and exact top-K cosine search.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::ItemId;
use crate::util::jsonl_lines;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("item {item:?} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        item: ItemId,
        expected: usize,
        found: usize,
    },
    #[error("item {0:?} has an all-zero vector")]
    ZeroVector(ItemId),
    #[error("item {0:?} has a non-finite vector component")]
    NonFinite(ItemId),
    #[error("item {0:?} has no embedding")]
    UnknownItem(ItemId),
    #[error("embedding file contains no vectors")]
    Empty,
}

/// A scored neighbor in a [`SimilarSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item: ItemId,
    pub score: f64,
}

/// T(i): the most similar items to `query`, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarSet {
    pub query: ItemId,
    pub members: Vec<ScoredItem>,
}

impl SimilarSet {
    pub fn empty(query: ItemId) -> Self {
        Self {
            query,
            members: Vec::new(),
        }
    }

    pub fn items(&self) -> impl Iterator<Item = &ItemId> {
        self.members.iter().map(|m| &m.item)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Dense item vectors, stored unit-normalized alongside the raw input.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    model_tag: String,
    ids: Vec<ItemId>,
    unit: Vec<Vec<f64>>,
    positions: HashMap<ItemId, usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingLine {
    Header {
        dim: usize,
        #[serde(default)]
        model_tag: String,
    },
    Vector {
        item_id: String,
        vector: Vec<f64>,
    },
}

#[derive(Serialize)]
struct HeaderRef<'a> {
    dim: usize,
    model_tag: &'a str,
}

#[derive(Serialize)]
struct VectorRef<'a> {
    item_id: &'a ItemId,
    vector: &'a [f64],
}

fn normalize(item: &ItemId, v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite(item.clone()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroVector(item.clone()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Orders by score descending, then item id ascending.
fn rank_order(a: &ScoredItem, b: &ScoredItem) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.item.cmp(&b.item))
}

impl EmbeddingStore {
    /// Builds a store from `(item, vector)` pairs. Later duplicates replace
    /// earlier ones.
    pub fn from_vectors(
        model_tag: impl Into<String>,
        vectors: impl IntoIterator<Item = (ItemId, Vec<f64>)>,
    ) -> Result<Self, EmbeddingError> {
        let mut store = Self {
            dim: 0,
            model_tag: model_tag.into(),
            ids: Vec::new(),
            unit: Vec::new(),
            positions: HashMap::new(),
        };
        for (item, v) in vectors {
            store.insert(item, &v)?;
        }
        Ok(store)
    }

    fn insert(&mut self, item: ItemId, v: &[f64]) -> Result<bool, EmbeddingError> {
        if self.dim == 0 {
            self.dim = v.len();
        }
        if v.len() != self.dim || v.is_empty() {
            return Err(EmbeddingError::DimensionMismatch {
                item,
                expected: self.dim,
                found: v.len(),
            });
        }
        let unit = normalize(&item, v)?;
        match self.positions.get(&item) {
            Some(&pos) => {
                self.unit[pos] = unit;
                Ok(true)
            }
            None => {
                self.positions.insert(item.clone(), self.ids.len());
                self.ids.push(item);
                self.unit.push(unit);
                Ok(false)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, item: &ItemId) -> bool {
        self.positions.contains_key(item)
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &ItemId> {
        self.ids.iter()
    }

    /// Unit-normalized vector for `item`.
    pub fn unit_vector(&self, item: &ItemId) -> Option<&[f64]> {
        self.positions.get(item).map(|&p| self.unit[p].as_slice())
    }

    fn position(&self, item: &ItemId) -> Result<usize, EmbeddingError> {
        self.positions
            .get(item)
            .copied()
            .ok_or_else(|| EmbeddingError::UnknownItem(item.clone()))
    }

    /// Cosine similarity, clamped to `[-1, 1]`.
    pub fn cosine(&self, i: &ItemId, j: &ItemId) -> Result<f64, EmbeddingError> {
        let (a, b) = (self.position(i)?, self.position(j)?);
        Ok(dot(&self.unit[a], &self.unit[b]).clamp(-1.0, 1.0))
    }

    /// T(i): the `k` items with the highest cosine to `i`, excluding `i`.
    /// Equal scores are ordered by item id.
    pub fn top_k_similar(&self, i: &ItemId, k: usize) -> Result<SimilarSet, EmbeddingError> {
        let q = self.position(i)?;
        if k == 0 {
            return Ok(SimilarSet::empty(i.clone()));
        }
        let query = &self.unit[q];
        let mut scored: Vec<ScoredItem> = self
            .ids
            .iter()
            .enumerate()
            .filter(|&(p, _)| p != q)
            .map(|(p, id)| ScoredItem {
                item: id.clone(),
                score: dot(query, &self.unit[p]).clamp(-1.0, 1.0),
            })
            .collect();
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(SimilarSet {
            query: i.clone(),
            members: scored,
        })
    }

    /// Top-K sets for many queries, computed in parallel and returned in
    /// query order.
    pub fn top_k_batch(&self, queries: &[ItemId], k: usize) -> Result<Vec<SimilarSet>, EmbeddingError> {
        queries.par_iter().map(|q| self.top_k_similar(q, k)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loads an embeddings JSONL file. An optional first line `{"dim", "model_tag"}`
/// declares the dimension; `expected_dim` overrides nothing but must agree.
pub fn load_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingStore, EmbeddingError> {
    let io_err = |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut store = EmbeddingStore::from_vectors("", std::iter::empty())?;
    store.dim = expected_dim.unwrap_or(0);
    for entry in jsonl_lines(path).map_err(io_err)? {
        let (line_no, line) = entry.map_err(io_err)?;
        let parsed: EmbeddingLine = serde_json::from_str(&line).map_err(|e| EmbeddingError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        match parsed {
            EmbeddingLine::Header { dim, model_tag } => {
                if !store.ids.is_empty() || (store.dim != 0 && store.dim != dim) {
                    return Err(EmbeddingError::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: format!("header dim {dim} conflicts with expected dim {}", store.dim),
                    });
                }
                store.dim = dim;
                store.model_tag = model_tag;
            }
            EmbeddingLine::Vector { item_id, vector } => {
                let item = ItemId::new(&item_id);
                if store.insert(item.clone(), &vector)? {
                    tracing::warn!(item = %item, line = line_no, "duplicate embedding, keeping the later vector");
                }
            }
        }
    }
    if store.is_empty() {
        return Err(EmbeddingError::Empty);
    }
    Ok(store)
}

/// Writes embeddings in the format `load_embeddings` reads.
pub fn write_embeddings<'a>(
    path: &Path,
    dim: usize,
    model_tag: &str,
    vectors: impl IntoIterator<Item = (&'a ItemId, &'a [f64])>,
) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", serde_json::to_string(&HeaderRef { dim, model_tag })?)?;
    for (item_id, vector) in vectors {
        writeln!(out, "{}", serde_json::to_string(&VectorRef { item_id, vector })?)?;
    }
    out.flush()
}
