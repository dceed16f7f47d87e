//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use itemrag::catalog::write_catalog;
use itemrag::embedding::write_embeddings;
use itemrag::{Catalog, EmbeddingStore, Item, ItemId, PurchaseHistory, UserId};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn item_id(i: usize) -> ItemId {
    ItemId::new(format!("i{i:03}"))
}

pub fn user_id(u: usize) -> UserId {
    UserId::new(format!("u{u:03}"))
}

/// Catalog from index lists; item `k` is `i{k:03}`.
pub fn catalog(n_items: usize, histories: &[Vec<usize>]) -> Catalog {
    let items = (0..n_items).map(|i| Item {
        id: item_id(i),
        description: format!("Product {i}"),
    });
    let histories = histories
        .iter()
        .enumerate()
        .filter(|(_, h)| !h.is_empty())
        .map(|(u, h)| PurchaseHistory {
            user: user_id(u),
            sequence: h.iter().map(|&i| item_id(i)).collect(),
        });
    Catalog::new(items, histories).expect("valid fixture")
}

/// Random catalog with at most `max_users` users and `max_items` items.
/// Histories may repeat items.
pub fn random_catalog(rng: &mut impl Rng, max_users: usize, max_items: usize) -> Catalog {
    let n_items = rng.random_range(1..=max_items);
    let n_users = rng.random_range(0..=max_users);
    let histories: Vec<Vec<usize>> = (0..n_users)
        .map(|_| {
            let len = rng.random_range(1..=8);
            (0..len).map(|_| rng.random_range(0..n_items)).collect()
        })
        .collect();
    catalog(n_items, &histories)
}

/// Direct double loop over users and item pairs; keys have `i < j`.
pub fn brute_cofreq(train: &Catalog) -> BTreeMap<(ItemId, ItemId), u32> {
    let mut counts = BTreeMap::new();
    for h in train.histories() {
        let set: BTreeSet<&ItemId> = h.sequence.iter().collect();
        let set: Vec<&ItemId> = set.into_iter().collect();
        for a in 0..set.len() {
            for b in 0..set.len() {
                if set[a] < set[b] {
                    *counts.entry((set[a].clone(), set[b].clone())).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

pub fn brute_count(counts: &BTreeMap<(ItemId, ItemId), u32>, i: &ItemId, j: &ItemId) -> u32 {
    let key = if i < j { (i.clone(), j.clone()) } else { (j.clone(), i.clone()) };
    counts.get(&key).copied().unwrap_or(0)
}

pub fn brute_neighbors(counts: &BTreeMap<(ItemId, ItemId), u32>, i: &ItemId) -> BTreeSet<ItemId> {
    counts
        .keys()
        .filter_map(|(a, b)| {
            if a == i {
                Some(b.clone())
            } else if b == i {
                Some(a.clone())
            } else {
                None
            }
        })
        .collect()
}

/// Items bought by users of a category-structured catalog.
pub struct Fixture {
    pub catalog: Catalog,
    pub store: EmbeddingStore,
    /// Category of each item, by item index.
    pub category: Vec<usize>,
}

/// Items belong to `n_categories` categories. Each user shops mostly in one
/// category; embeddings are the one-hot category plus small noise, so
/// similar items share a category.
pub fn synthetic(n_users: usize, n_items: usize, n_categories: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let category: Vec<usize> = (0..n_items).map(|i| i % n_categories).collect();
    let by_cat: Vec<Vec<usize>> = (0..n_categories)
        .map(|c| (0..n_items).filter(|&i| category[i] == c).collect())
        .collect();
    let histories: Vec<Vec<usize>> = (0..n_users)
        .map(|_| {
            let home = rng.random_range(0..n_categories);
            let len = rng.random_range(3..=10);
            (0..len)
                .map(|_| {
                    if rng.random_bool(0.85) {
                        *by_cat[home].choose(&mut rng).unwrap()
                    } else {
                        rng.random_range(0..n_items)
                    }
                })
                .collect()
        })
        .collect();
    let items = (0..n_items).map(|i| Item {
        id: item_id(i),
        description: format!("Category {} product {i}", category[i]),
    });
    let catalog = Catalog::new(
        items,
        histories.iter().enumerate().map(|(u, h)| PurchaseHistory {
            user: user_id(u),
            sequence: h.iter().map(|&i| item_id(i)).collect(),
        }),
    )
    .unwrap();
    let dim = n_categories + 2;
    let vectors: Vec<(ItemId, Vec<f64>)> = (0..n_items)
        .map(|i| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.1..0.1)).collect();
            v[category[i]] += 1.0;
            (item_id(i), v)
        })
        .collect();
    let store = EmbeddingStore::from_vectors("synthetic", vectors).unwrap();
    Fixture {
        catalog,
        store,
        category,
    }
}

pub struct FixtureFiles {
    pub interactions: PathBuf,
    pub items: PathBuf,
    pub embeddings: PathBuf,
    pub mock: PathBuf,
}

/// Mock that echoes retrieved titles and ranks by co-purchase overlap.
pub const MOCK_SCRIPT: &str = r#"{
  "model_tag": "mock-overlap",
  "summary": {"kind": "echo_titles", "max": 3},
  "ranking": {"kind": "co_purchase_overlap"}
}"#;

pub fn write_fixture(dir: &Path, fixture: &Fixture) -> FixtureFiles {
    let files = FixtureFiles {
        interactions: dir.join("interactions.jsonl"),
        items: dir.join("items.jsonl"),
        embeddings: dir.join("embeddings.jsonl"),
        mock: dir.join("mock.json"),
    };
    write_catalog(&fixture.catalog, &files.interactions, &files.items).unwrap();
    let ids: Vec<ItemId> = fixture.store.item_ids().cloned().collect();
    write_embeddings(
        &files.embeddings,
        fixture.store.dim(),
        fixture.store.model_tag(),
        ids.iter().map(|id| (id, fixture.store.unit_vector(id).unwrap())),
    )
    .unwrap();
    std::fs::write(&files.mock, MOCK_SCRIPT).unwrap();
    files
}
