//! Item–item co-purchase counts built from deduplicated user purchase sets.
//!
//! `c_ij` is the number of users whose purchase set contains both `i` and
//! `j`. Each unordered pair is stored once under its `(min, max)` key, so
//! symmetry holds by construction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ItemId};
use crate::util::{jsonl_lines, sha256_hex, short_hash};

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("co-purchase frequency of an item with itself is undefined ({0:?})")]
    SelfPair(ItemId),
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("index content hash mismatch: header says {expected}, content hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
}

/// Build settings.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IndexOptions {
    /// Upper bound on `Σ_u |M(u)|²` before a resource warning is emitted.
    pub pair_budget: u64,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            pair_budget: 500_000_000,
        }
    }
}

impl IndexOptions {
    pub fn config_hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoPurchaseIndex {
    counts: BTreeMap<(ItemId, ItemId), u32>,
    neighbors: HashMap<ItemId, BTreeSet<ItemId>>,
    users: usize,
    config_hash: String,
}

fn canonical<'a>(i: &'a ItemId, j: &'a ItemId) -> (&'a ItemId, &'a ItemId) {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

impl CoPurchaseIndex {
    fn from_counts(counts: BTreeMap<(ItemId, ItemId), u32>, users: usize, config_hash: String) -> Self {
        let mut neighbors: HashMap<ItemId, BTreeSet<ItemId>> = HashMap::new();
        for (a, b) in counts.keys() {
            neighbors.entry(a.clone()).or_default().insert(b.clone());
            neighbors.entry(b.clone()).or_default().insert(a.clone());
        }
        Self {
            counts,
            neighbors,
            users,
            config_hash,
        }
    }

    /// N(i): items co-purchased with `i` at least once. Empty for cold or
    /// unknown items; never contains `i`.
    pub fn neighbors(&self, i: &ItemId) -> impl Iterator<Item = &ItemId> + '_ {
        self.neighbors.get(i).into_iter().flatten()
    }

    pub fn neighbor_set(&self, i: &ItemId) -> BTreeSet<ItemId> {
        self.neighbors(i).cloned().collect()
    }

    pub fn n_neighbors(&self, i: &ItemId) -> usize {
        self.neighbors.get(i).map_or(0, BTreeSet::len)
    }

    /// `c_ij`; errors when `i == j`.
    pub fn cofreq(&self, i: &ItemId, j: &ItemId) -> Result<u32, IndexError> {
        if i == j {
            return Err(IndexError::SelfPair(i.clone()));
        }
        Ok(self.count(i, j))
    }

    /// `c_ij` with the self-pair mapped to 0.
    pub fn count(&self, i: &ItemId, j: &ItemId) -> u32 {
        if i == j {
            return 0;
        }
        let (a, b) = canonical(i, j);
        // BTreeMap lookup by borrowed tuple needs owned keys
        self.counts.get(&(a.clone(), b.clone())).copied().unwrap_or(0)
    }

    /// Stored pairs in canonical order, `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (&ItemId, &ItemId, u32)> {
        self.counts.iter().map(|((a, b), c)| (a, b, *c))
    }

    pub fn n_pairs(&self) -> usize {
        self.counts.len()
    }

    pub fn users_processed(&self) -> usize {
        self.users
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn body_lines(&self) -> Vec<String> {
        self.counts
            .iter()
            .map(|((i, j), c)| {
                serde_json::to_string(&DumpPairRef { i, j, c: *c }).expect("serializable")
            })
            .collect()
    }

    /// Hash of the sorted pair dump.
    pub fn content_hash(&self) -> String {
        let mut buf = String::new();
        for line in self.body_lines() {
            buf.push_str(&line);
            buf.push('\n');
        }
        sha256_hex(buf.as_bytes())
    }
}

/// Builds the index from training histories with default options.
pub fn build_index(train: &Catalog) -> CoPurchaseIndex {
    build_index_with(train, IndexOptions::default())
}

pub fn build_index_with(train: &Catalog, options: IndexOptions) -> CoPurchaseIndex {
    let mut counts: HashMap<(ItemId, ItemId), u32> = HashMap::new();
    let mut work: u64 = 0;
    let mut users = 0;
    for history in train.histories() {
        users += 1;
        let set: BTreeSet<&ItemId> = history.sequence.iter().collect();
        let set: Vec<&ItemId> = set.into_iter().collect();
        work += (set.len() as u64).pow(2);
        for (a_pos, a) in set.iter().enumerate() {
            for b in &set[a_pos + 1..] {
                *counts.entry(((*a).clone(), (*b).clone())).or_insert(0) += 1;
            }
        }
    }
    if work > options.pair_budget {
        tracing::warn!(
            work,
            budget = options.pair_budget,
            "co-purchase build exceeded the configured pair budget"
        );
    }
    CoPurchaseIndex::from_counts(counts.into_iter().collect(), users, options.config_hash())
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    config_hash: String,
    users: usize,
    pairs: usize,
    content_hash: String,
}

#[derive(Serialize)]
struct DumpPairRef<'a> {
    i: &'a ItemId,
    j: &'a ItemId,
    c: u32,
}

#[derive(Deserialize)]
struct DumpPair {
    i: String,
    j: String,
    c: u32,
}

/// Writes the header line followed by one `{"i","j","c"}` line per pair.
pub fn write_index(index: &CoPurchaseIndex, path: &Path) -> Result<(), IndexError> {
    let io_err = |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    };
    let header = DumpHeader {
        config_hash: index.config_hash.clone(),
        users: index.users,
        pairs: index.counts.len(),
        content_hash: index.content_hash(),
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    writeln!(out, "{}", serde_json::to_string(&header).expect("serializable")).map_err(io_err)?;
    for line in index.body_lines() {
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads an index dump and verifies its content hash.
pub fn read_index(path: &Path) -> Result<CoPurchaseIndex, IndexError> {
    let io_err = |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    };
    let format_err = |line: usize, message: String| IndexError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = jsonl_lines(path).map_err(io_err)?;
    let (line_no, first) = lines
        .next()
        .ok_or_else(|| format_err(1, "missing header line".into()))?
        .map_err(io_err)?;
    let header: DumpHeader =
        serde_json::from_str(&first).map_err(|e| format_err(line_no, e.to_string()))?;

    let mut counts = BTreeMap::new();
    for entry in lines {
        let (line_no, line) = entry.map_err(io_err)?;
        let pair: DumpPair =
            serde_json::from_str(&line).map_err(|e| format_err(line_no, e.to_string()))?;
        if pair.i >= pair.j {
            return Err(format_err(line_no, "pair is not in canonical i < j order".into()));
        }
        if pair.c == 0 {
            return Err(format_err(line_no, "stored counts must be positive".into()));
        }
        counts.insert((ItemId::new(&pair.i), ItemId::new(&pair.j)), pair.c);
    }
    let index = CoPurchaseIndex::from_counts(counts, header.users, header.config_hash);
    let actual = index.content_hash();
    if actual != header.content_hash {
        return Err(IndexError::HashMismatch {
            expected: header.content_hash,
            actual,
        });
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Item, PurchaseHistory, UserId};

    pub(crate) fn catalog(histories: &[&[&str]]) -> Catalog {
        let mut ids: Vec<&str> = histories.iter().flat_map(|s| s.iter().copied()).collect();
        ids.sort();
        ids.dedup();
        Catalog::new(
            ids.into_iter().map(|id| Item {
                id: ItemId::new(id),
                description: id.to_string(),
            }),
            histories.iter().enumerate().map(|(n, s)| PurchaseHistory {
                user: UserId::new(format!("u{n}")),
                sequence: s.iter().map(ItemId::new).collect(),
            }),
        )
        .unwrap()
    }

    fn id(s: &str) -> ItemId {
        ItemId::new(s)
    }

    #[test]
    fn two_user_counts() {
        let idx = build_index(&catalog(&[&["A", "B"], &["A", "B", "C"]]));
        assert_eq!(idx.cofreq(&id("A"), &id("B")).unwrap(), 2);
        assert_eq!(idx.cofreq(&id("A"), &id("C")).unwrap(), 1);
        assert_eq!(idx.cofreq(&id("B"), &id("C")).unwrap(), 1);
        assert_eq!(idx.cofreq(&id("B"), &id("A")).unwrap(), 2);
        assert_eq!(idx.users_processed(), 2);
    }

    #[test]
    fn repeated_purchases_collapse() {
        let idx = build_index(&catalog(&[&["A", "A", "B"]]));
        assert_eq!(idx.cofreq(&id("A"), &id("B")).unwrap(), 1);
        assert_eq!(idx.n_pairs(), 1);
    }

    #[test]
    fn single_item_user_gives_empty_index() {
        let idx = build_index(&catalog(&[&["A"]]));
        assert_eq!(idx.n_pairs(), 0);
        assert_eq!(idx.neighbors(&id("A")).count(), 0);
    }

    #[test]
    fn neighbor_sets() {
        let idx = build_index(&catalog(&[&["A", "B", "C"]]));
        let n: Vec<_> = idx.neighbors(&id("A")).map(|i| i.as_str()).collect();
        assert_eq!(n, ["B", "C"]);
        assert_eq!(idx.neighbors(&id("Z")).count(), 0);

        let idx = build_index(&catalog(&[&["A", "B"], &["A", "B", "C"]]));
        assert!(idx.neighbor_set(&id("B")).contains(&id("A")));
        assert!(!idx.neighbor_set(&id("B")).contains(&id("B")));
    }

    #[test]
    fn unseen_pair_is_zero_and_self_pair_errors() {
        let idx = build_index(&catalog(&[&["A", "B"], &["C", "D"]]));
        assert_eq!(idx.cofreq(&id("A"), &id("D")).unwrap(), 0);
        assert!(matches!(idx.cofreq(&id("A"), &id("A")), Err(IndexError::SelfPair(_))));
        assert_eq!(idx.count(&id("A"), &id("A")), 0);
    }

    #[test]
    fn dump_roundtrip_and_tamper_detection() {
        let idx = build_index(&catalog(&[&["A", "B"], &["A", "B", "C"], &["C", "D"]]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.jsonl");
        write_index(&idx, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + idx.n_pairs());
        assert_eq!(lines[1], r#"{"i":"A","j":"B","c":2}"#);
        assert_eq!(read_index(&path).unwrap(), idx);

        std::fs::write(&path, text.replace(r#""c":2"#, r#""c":3"#)).unwrap();
        assert!(matches!(read_index(&path), Err(IndexError::HashMismatch { .. })));
    }
}
