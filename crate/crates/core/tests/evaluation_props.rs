mod common;

use std::collections::BTreeSet;

use itemrag::evaluation::{evaluate, hit_ratio_at_k, ndcg_at_k, sample_candidates, sample_users};
use itemrag::recommender::RankedList;
use itemrag::{leave_one_out, make_cold_start};
use proptest::prelude::*;

#[test]
fn metric_table_matches_formulas() {
    for rank in 1..=11usize {
        for k in [1usize, 3, 5] {
            let hr = if rank <= k { 1.0 } else { 0.0 };
            let ndcg = if rank <= k { std::f64::consts::LN_2 / ((rank + 1) as f64).ln() } else { 0.0 };
            assert_eq!(hit_ratio_at_k(rank, k), hr, "HR rank {rank} k {k}");
            assert!((ndcg_at_k(rank, k) - ndcg).abs() <= 1e-9, "NDCG rank {rank} k {k}");
        }
    }
}

proptest! {
    #[test]
    fn metrics_are_monotone_in_k(rank in 1usize..12) {
        for (a, b) in [(1, 3), (3, 5), (1, 5)] {
            prop_assert!(hit_ratio_at_k(rank, a) <= hit_ratio_at_k(rank, b));
            prop_assert!(ndcg_at_k(rank, a) <= ndcg_at_k(rank, b));
        }
    }

    #[test]
    fn cold_start_removes_every_target(seed in 0u64..500) {
        let fx = common::synthetic(50, 30, 3, seed);
        let split = leave_one_out(&fx.catalog);
        let cold = make_cold_start(&split);
        let targets: BTreeSet<_> = split.targets.values().collect();
        for h in cold.train.histories() {
            prop_assert!(h.sequence.iter().all(|i| !targets.contains(i)));
        }
        prop_assert_eq!(&cold.targets, &split.targets);
        prop_assert_eq!(cold.train.n_items(), fx.catalog.n_items());
    }

    #[test]
    fn protocol_is_deterministic(seed in any::<u64>(), data_seed in 0u64..100) {
        let fx = common::synthetic(60, 40, 4, data_seed);
        let split = leave_one_out(&fx.catalog);
        let users = sample_users(&split, 20, seed);
        prop_assert_eq!(&users, &sample_users(&split, 20, seed));
        for u in &users {
            let c = sample_candidates(&split, u, seed).unwrap();
            prop_assert_eq!(&c, &sample_candidates(&split, u, seed).unwrap());
            let seen: BTreeSet<_> = split.train.history(u.as_str()).unwrap().sequence.iter().collect();
            prop_assert_eq!(c.presented_order.len(), 10);
            prop_assert!(c.negatives.iter().all(|n| *n != c.ground_truth && !seen.contains(n)));
        }
        // a ranker that keeps presented order
        let ranker = |c: &itemrag::CandidateSet| -> Result<RankedList, String> {
            Ok(RankedList { order: c.presented_order.clone(), raw_response: String::new(), repaired: false })
        };
        let a = evaluate(&split, ranker, &users, seed).unwrap();
        let b = evaluate(&split, ranker, &users, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn perfect_ranker_scores_one() {
    let fx = common::synthetic(40, 30, 3, 1);
    let split = leave_one_out(&fx.catalog);
    let users = sample_users(&split, 100, 5);
    let report = evaluate(
        &split,
        |c| -> Result<RankedList, String> {
            let mut order = vec![c.ground_truth.clone()];
            order.extend(c.negatives.iter().cloned());
            Ok(RankedList { order, raw_response: String::new(), repaired: false })
        },
        &users,
        5,
    )
    .unwrap();
    assert!(report.hr.values().chain(report.ndcg.values()).all(|&v| v == 1.0));
}
