//! Users' purchase sequences, item descriptions and the leave-one-out split.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::util::jsonl_lines;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(value: impl AsRef<str>) -> Self {
                Self(Arc::from(value.as_ref()))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:?}", &*self.0)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl From<&str> for $name {
            fn from(value: &str) -> Self {
                Self::new(value)
            }
        }
    };
}

string_id!(
    /// Opaque item identifier.
    ItemId
);
string_id!(
    /// Opaque user identifier.
    UserId
);

/// A catalog item and its text description (typically the title).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub description: String,
}

/// A user's purchases in chronological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PurchaseHistory {
    pub user: UserId,
    pub sequence: Vec<ItemId>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("failed to read {path}: {source}")]
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
    #[error("interaction references unknown item {item:?}")]
    UnknownItem { item: ItemId, user: UserId },
    #[error("item {0:?} is defined more than once")]
    DuplicateItem(ItemId),
    #[error("item {0:?} has an empty description")]
    EmptyDescription(ItemId),
    #[error("history for user {0:?} is empty")]
    EmptyHistory(UserId),
}

/// Loader knobs.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Users with fewer interactions than this are dropped after loading.
    /// `0` disables filtering.
    pub min_user_interactions: usize,
}

#[derive(Deserialize)]
struct InteractionRecord {
    user_id: String,
    item_id: String,
    timestamp: i64,
}

#[derive(Deserialize)]
struct ItemRecord {
    item_id: String,
    description: String,
}

#[derive(Serialize)]
struct InteractionRecordRef<'a> {
    user_id: &'a UserId,
    item_id: &'a ItemId,
    timestamp: i64,
}

#[derive(Serialize)]
struct ItemRecordRef<'a> {
    item_id: &'a ItemId,
    description: &'a str,
}

/// Immutable collection of items and user purchase histories.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Catalog {
    items: BTreeMap<ItemId, Item>,
    histories: BTreeMap<UserId, PurchaseHistory>,
}

impl Catalog {
    /// Builds a catalog, checking that every history is non-empty, every
    /// referenced item exists and every description is non-blank.
    pub fn new(
        items: impl IntoIterator<Item = Item>,
        histories: impl IntoIterator<Item = PurchaseHistory>,
    ) -> Result<Self, CatalogError> {
        let mut item_map = BTreeMap::new();
        for item in items {
            if item.description.trim().is_empty() {
                return Err(CatalogError::EmptyDescription(item.id));
            }
            if item_map.contains_key(&item.id) {
                return Err(CatalogError::DuplicateItem(item.id));
            }
            item_map.insert(item.id.clone(), item);
        }
        let mut history_map = BTreeMap::new();
        for history in histories {
            if history.sequence.is_empty() {
                return Err(CatalogError::EmptyHistory(history.user));
            }
            if let Some(missing) = history.sequence.iter().find(|i| !item_map.contains_key(*i)) {
                return Err(CatalogError::UnknownItem {
                    item: missing.clone(),
                    user: history.user.clone(),
                });
            }
            history_map.insert(history.user.clone(), history);
        }
        Ok(Self {
            items: item_map,
            histories: history_map,
        })
    }

    /// Same items, replaced histories. Empty histories are dropped.
    pub(crate) fn with_histories(&self, histories: BTreeMap<UserId, Vec<ItemId>>) -> Self {
        let histories = histories
            .into_iter()
            .filter(|(_, seq)| !seq.is_empty())
            .map(|(user, sequence)| {
                debug_assert!(sequence.iter().all(|i| self.items.contains_key(i)));
                (user.clone(), PurchaseHistory { user, sequence })
            })
            .collect();
        Self {
            items: self.items.clone(),
            histories,
        }
    }

    pub fn items(&self) -> impl Iterator<Item = &Item> {
        self.items.values()
    }

    pub fn item(&self, id: &str) -> Option<&Item> {
        self.items.get(id)
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &ItemId> {
        self.items.keys()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn histories(&self) -> impl Iterator<Item = &PurchaseHistory> {
        self.histories.values()
    }

    pub fn history(&self, user: &str) -> Option<&PurchaseHistory> {
        self.histories.get(user)
    }

    pub fn n_users(&self) -> usize {
        self.histories.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.histories.values().map(|h| h.sequence.len()).sum()
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CatalogError + '_ {
    move |source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_line<T: serde::de::DeserializeOwned>(
    path: &Path,
    line_no: usize,
    line: &str,
) -> Result<T, CatalogError> {
    serde_json::from_str(line).map_err(|e| CatalogError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })
}

fn non_empty(path: &Path, line: usize, field: &str, value: &str) -> Result<(), CatalogError> {
    if value.is_empty() {
        return Err(CatalogError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("field `{field}` is empty"),
        });
    }
    Ok(())
}

/// Loads a catalog from an interactions JSONL and an items JSONL file.
///
/// Histories are ordered by timestamp; equal timestamps keep input line order.
pub fn load_catalog(interactions_path: &Path, items_path: &Path) -> Result<Catalog, CatalogError> {
    load_catalog_with(interactions_path, items_path, LoadOptions::default())
}

/// Reads an items JSONL file in file order. Descriptions are not validated
/// here; [`Catalog::new`] rejects empty ones.
pub fn load_items(items_path: &Path) -> Result<Vec<Item>, CatalogError> {
    let mut items = Vec::new();
    for entry in jsonl_lines(items_path).map_err(io_err(items_path))? {
        let (line_no, line) = entry.map_err(io_err(items_path))?;
        let rec: ItemRecord = parse_line(items_path, line_no, &line)?;
        non_empty(items_path, line_no, "item_id", &rec.item_id)?;
        items.push(Item {
            id: ItemId::new(&rec.item_id),
            description: rec.description,
        });
    }
    Ok(items)
}

pub fn load_catalog_with(
    interactions_path: &Path,
    items_path: &Path,
    options: LoadOptions,
) -> Result<Catalog, CatalogError> {
    let items = load_items(items_path)?;

    // (timestamp, line number) per user; line numbers are unique so the
    // ordering is total.
    let mut events: BTreeMap<UserId, Vec<(i64, usize, ItemId)>> = BTreeMap::new();
    for entry in jsonl_lines(interactions_path).map_err(io_err(interactions_path))? {
        let (line_no, line) = entry.map_err(io_err(interactions_path))?;
        let rec: InteractionRecord = parse_line(interactions_path, line_no, &line)?;
        non_empty(interactions_path, line_no, "user_id", &rec.user_id)?;
        non_empty(interactions_path, line_no, "item_id", &rec.item_id)?;
        events
            .entry(UserId::new(&rec.user_id))
            .or_default()
            .push((rec.timestamp, line_no, ItemId::new(&rec.item_id)));
    }

    let histories = events.into_iter().filter_map(|(user, mut evs)| {
        if evs.len() < options.min_user_interactions {
            return None;
        }
        evs.sort_by_key(|e| (e.0, e.1));
        Some(PurchaseHistory {
            user,
            sequence: evs.into_iter().map(|(_, _, item)| item).collect(),
        })
    });
    Catalog::new(items, histories)
}

/// Writes a catalog in the same JSONL formats `load_catalog` reads.
///
/// Timestamps are written as sequence positions, which reproduces the
/// original order on reload.
pub fn write_catalog(
    catalog: &Catalog,
    interactions_path: &Path,
    items_path: &Path,
) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(items_path)?);
    for item in catalog.items() {
        let rec = ItemRecordRef {
            item_id: &item.id,
            description: &item.description,
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;

    let mut out = BufWriter::new(File::create(interactions_path)?);
    for history in catalog.histories() {
        for (pos, item) in history.sequence.iter().enumerate() {
            let rec = InteractionRecordRef {
                user_id: &history.user,
                item_id: item,
                timestamp: pos as i64,
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    out.flush()
}

/// Leave-one-out split: each user's last purchase is the prediction target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSplit {
    pub train: Catalog,
    pub targets: BTreeMap<UserId, ItemId>,
}

/// Holds out the last item of every history with at least two purchases.
/// Single-purchase users are dropped from both train and targets.
pub fn leave_one_out(catalog: &Catalog) -> EvalSplit {
    let mut targets = BTreeMap::new();
    let mut train = BTreeMap::new();
    for history in catalog.histories() {
        if let Some((last, rest)) = history.sequence.split_last() {
            if rest.is_empty() {
                continue;
            }
            targets.insert(history.user.clone(), last.clone());
            train.insert(history.user.clone(), rest.to_vec());
        }
    }
    EvalSplit {
        train: catalog.with_histories(train),
        targets,
    }
}
