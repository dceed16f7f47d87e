mod common;

use std::collections::{BTreeMap, BTreeSet};

use itemrag::embedding::ScoredItem;
use itemrag::retrieval::{build_pool, query_rng, sample_retrieval, sampling_weight};
use itemrag::{build_index, ItemId, RetrievalConfig, RetrievalEngine, SimilarSet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// (n_items, histories, query, T(query) as item indices)
fn instance() -> impl Strategy<Value = (usize, Vec<Vec<usize>>, usize, Vec<usize>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(prop::collection::vec(0..n, 1..10), 0..50),
            0..n,
            prop::collection::btree_set(0..n, 0..=5),
        )
            .prop_map(|(n, hs, q, t)| (n, hs, q, t.into_iter().filter(|&x| x != q).collect()))
    })
}

fn similar(query: usize, t: &[usize]) -> SimilarSet {
    SimilarSet {
        query: common::item_id(query),
        members: t
            .iter()
            .map(|&x| ScoredItem {
                item: common::item_id(x),
                score: 0.5,
            })
            .collect(),
    }
}

fn oracle_pool(counts: &BTreeMap<(ItemId, ItemId), u32>, i: &ItemId, t: &SimilarSet, use_sim: bool) -> BTreeSet<ItemId> {
    let mut pool = common::brute_neighbors(counts, i);
    if use_sim {
        for q in t.items() {
            pool.extend(common::brute_neighbors(counts, q));
        }
    }
    pool.remove(i);
    pool
}

fn oracle_weight(counts: &BTreeMap<(ItemId, ItemId), u32>, i: &ItemId, j: &ItemId, t: &SimilarSet) -> f64 {
    let c = |a: &ItemId, b: &ItemId| if a == b { 0.0 } else { f64::from(common::brute_count(counts, a, b)) };
    let mean = if t.is_empty() {
        0.0
    } else {
        t.items().map(|q| c(q, j)).sum::<f64>() / t.len() as f64
    };
    c(i, j) + mean
}

proptest! {
    #[test]
    fn pool_matches_oracle((n, hs, q, t) in instance(), use_sim in any::<bool>()) {
        let catalog = common::catalog(n, &hs);
        let index = build_index(&catalog);
        let counts = common::brute_cofreq(&catalog);
        let i = common::item_id(q);
        let sim = similar(q, &t);
        let cfg = RetrievalConfig { use_sim_items: use_sim, ..Default::default() };
        prop_assert_eq!(build_pool(&i, &index, &sim, &cfg), oracle_pool(&counts, &i, &sim, use_sim));
    }

    #[test]
    fn weights_match_oracle_and_are_positive((n, hs, q, t) in instance()) {
        let catalog = common::catalog(n, &hs);
        let index = build_index(&catalog);
        let counts = common::brute_cofreq(&catalog);
        let i = common::item_id(q);
        let sim = similar(q, &t);
        let pool = build_pool(&i, &index, &sim, &RetrievalConfig::default());
        for j in (0..n).map(common::item_id) {
            let got = sampling_weight(&i, &j, &index, &sim);
            let want = oracle_weight(&counts, &i, &j, &sim);
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", got, want);
            if pool.contains(&j) {
                prop_assert!(got > 0.0);
            }
        }
    }

    #[test]
    fn sample_size_and_distinctness((n, hs, q, t) in instance(), size in 1usize..12, weighted in any::<bool>(), seed in any::<u64>()) {
        let catalog = common::catalog(n, &hs);
        let index = build_index(&catalog);
        let i = common::item_id(q);
        let sim = similar(q, &t);
        let cfg = RetrievalConfig { n: size, use_cofreq_weights: weighted, rng_seed: seed, ..Default::default() };
        let pool = build_pool(&i, &index, &sim, &cfg);
        let weights = pool.iter().map(|j| (j.clone(), sampling_weight(&i, j, &index, &sim))).collect();
        let result = sample_retrieval(&i, &pool, &weights, &cfg, &mut query_rng(seed, &i));
        prop_assert_eq!(result.sampled.len(), size.min(pool.len()));
        prop_assert_eq!(result.pool_size, pool.len());
        let distinct: BTreeSet<_> = result.items().collect();
        prop_assert_eq!(distinct.len(), result.sampled.len());
        prop_assert!(result.items().all(|j| pool.contains(j)));
    }

    #[test]
    fn engine_is_deterministic(seed in any::<u64>(), data_seed in 0u64..1000) {
        let fx = common::synthetic(40, 24, 4, data_seed);
        let index = build_index(&fx.catalog);
        let cfg = RetrievalConfig { n: 4, rng_seed: seed, ..Default::default() };
        let a = RetrievalEngine::new(&index, Some(&fx.store), cfg).unwrap();
        let b = RetrievalEngine::new(&index, Some(&fx.store), cfg).unwrap();
        let ids: Vec<ItemId> = fx.catalog.item_ids().cloned().collect();
        let ra = a.retrieve_all(&ids);
        let rb = b.retrieve_all(&ids);
        prop_assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
    }
}

/// First-draw frequencies over a 6-item pool follow w / Σw.
#[test]
fn first_draw_frequencies_follow_weights() {
    let pool: BTreeSet<ItemId> = (0..6).map(common::item_id).collect();
    let raw = [1.0, 2.0, 3.0, 0.5, 4.0, 1.5];
    let weights: BTreeMap<ItemId, f64> = pool.iter().cloned().zip(raw).collect();
    let total: f64 = raw.iter().sum();
    let cfg = RetrievalConfig { n: 2, ..Default::default() };
    let query = ItemId::new("q");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 100_000;
    let mut hits = [0usize; 6];
    for _ in 0..trials {
        let r = sample_retrieval(&query, &pool, &weights, &cfg, &mut rng);
        let first = pool.iter().position(|j| *j == r.sampled[0].item).unwrap();
        hits[first] += 1;
    }
    for (h, w) in hits.iter().zip(raw) {
        let freq = *h as f64 / trials as f64;
        assert!((freq - w / total).abs() <= 0.01, "{freq} vs {}", w / total);
    }
}
