//! Leave-one-out evaluation with one ground-truth item and sampled negatives
//! per user, Hit-Ratio/NDCG metrics and the cold-start transform.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::catalog::{Catalog, EvalSplit, ItemId, UserId};
use crate::recommender::{RankedList, RankingRecord};
use crate::util::derive_seed;

pub const N_NEGATIVES: usize = 9;
pub const HR_CUTOFFS: [usize; 3] = [1, 3, 5];
pub const NDCG_CUTOFFS: [usize; 2] = [3, 5];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("user {0:?} has no held-out target")]
    UnknownUser(UserId),
    #[error("user {user:?} has only {eligible} eligible negatives, {needed} required")]
    NotEnoughNegatives {
        user: UserId,
        eligible: usize,
        needed: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidateSet {
    pub user: UserId,
    pub ground_truth: ItemId,
    pub negatives: Vec<ItemId>,
    /// Ground truth and negatives, shuffled.
    pub presented_order: Vec<ItemId>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.presented_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presented_order.is_empty()
    }

    /// Rank assigned to users the ranker could not score: a miss at every cutoff.
    pub fn miss_rank(&self) -> usize {
        self.len() + 1
    }
}

/// Samples `N_NEGATIVES` negatives for `user`. See [`sample_candidates_with`].
pub fn sample_candidates(split: &EvalSplit, user: &UserId, seed: u64) -> Result<CandidateSet, EvalError> {
    sample_candidates_with(split, user, seed, N_NEGATIVES)
}

/// Draws negatives uniformly from the catalog minus the ground truth and the
/// user's training items, then shuffles the candidates. The result depends
/// only on `(seed, user)` and the split.
pub fn sample_candidates_with(
    split: &EvalSplit,
    user: &UserId,
    seed: u64,
    n_negatives: usize,
) -> Result<CandidateSet, EvalError> {
    let gt = split.targets.get(user).ok_or_else(|| EvalError::UnknownUser(user.clone()))?;
    let seen: BTreeSet<&ItemId> = split
        .train
        .history(user.as_str())
        .map(|h| h.sequence.iter().collect())
        .unwrap_or_default();
    let eligible: Vec<&ItemId> = split
        .train
        .item_ids()
        .filter(|i| *i != gt && !seen.contains(i))
        .collect();
    if eligible.len() < n_negatives {
        return Err(EvalError::NotEnoughNegatives {
            user: user.clone(),
            eligible: eligible.len(),
            needed: n_negatives,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "candidates", user.as_str()));
    let negatives: Vec<ItemId> = index::sample(&mut rng, eligible.len(), n_negatives)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect();
    let mut presented_order = negatives.clone();
    presented_order.push(gt.clone());
    presented_order.shuffle(&mut rng);
    Ok(CandidateSet {
        user: user.clone(),
        ground_truth: gt.clone(),
        negatives,
        presented_order,
    })
}

/// A seeded sample of `n` evaluation users, sorted by id. All users are
/// returned when fewer than `n` exist.
pub fn sample_users(split: &EvalSplit, n: usize, seed: u64) -> Vec<UserId> {
    let users: Vec<&UserId> = split.targets.keys().collect();
    if users.len() <= n {
        return users.into_iter().cloned().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "users", ""));
    let mut picked: Vec<UserId> = index::sample(&mut rng, users.len(), n)
        .into_iter()
        .map(|i| users[i].clone())
        .collect();
    picked.sort();
    picked
}

pub fn hit_ratio_at_k(gt_rank: usize, k: usize) -> f64 {
    debug_assert!(gt_rank >= 1);
    if gt_rank <= k {
        1.0
    } else {
        0.0
    }
}

/// NDCG with a single relevant item (IDCG = 1).
pub fn ndcg_at_k(gt_rank: usize, k: usize) -> f64 {
    debug_assert!(gt_rank >= 1);
    if gt_rank <= k {
        1.0 / ((gt_rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_users: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// `(user, ground-truth rank)`, sorted by user.
    pub per_user: Vec<(UserId, usize)>,
    /// Users whose ranking failed, with the failure message.
    pub failures: Vec<(UserId, String)>,
    pub rankings: Vec<RankingRecord>,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl EvalReport {
    /// Aggregates ground-truth ranks into unweighted per-user means.
    pub fn from_ranks(per_user: Vec<(UserId, usize)>) -> Self {
        let n = per_user.len();
        let mean = |f: &dyn Fn(usize) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_user.iter().map(|(_, r)| f(*r)).sum::<f64>() / n as f64
            }
        };
        let hr = HR_CUTOFFS.iter().map(|&k| (k, mean(&|r| hit_ratio_at_k(r, k)))).collect();
        let ndcg = NDCG_CUTOFFS.iter().map(|&k| (k, mean(&|r| ndcg_at_k(r, k)))).collect();
        Self {
            n_users: n,
            hr,
            ndcg,
            per_user,
            failures: Vec::new(),
            rankings: Vec::new(),
        }
    }

    /// Report JSON with metrics ×100 rounded to one decimal.
    pub fn presentation(&self, config: serde_json::Value, seed: u64) -> serde_json::Value {
        let scale = |m: &BTreeMap<usize, f64>| -> BTreeMap<String, f64> {
            m.iter().map(|(k, v)| (k.to_string(), round1(v * 100.0))).collect()
        };
        serde_json::json!({
            "n_users": self.n_users,
            "hr": scale(&self.hr),
            "ndcg": scale(&self.ndcg),
            "config": config,
            "seed": seed,
        })
    }
}

/// Ranks every candidate set with `ranker` (in parallel) and aggregates.
/// Failed users are recorded and scored as misses.
pub fn evaluate_candidates<F, E>(candidates: &[CandidateSet], ranker: F) -> EvalReport
where
    F: Fn(&CandidateSet) -> Result<RankedList, E> + Sync,
    E: Display,
{
    let mut outcomes: Vec<(UserId, usize, Option<RankingRecord>, Option<String>)> = candidates
        .par_iter()
        .map(|c| match ranker(c) {
            Ok(list) => {
                let gt_rank = list.rank_of(&c.ground_truth).unwrap_or_else(|| c.miss_rank());
                let record = RankingRecord {
                    user_id: c.user.clone(),
                    order: list.order,
                    gt_rank,
                    raw: list.raw_response,
                };
                (c.user.clone(), gt_rank, Some(record), None)
            }
            Err(err) => {
                tracing::warn!(user = %c.user, %err, "ranking failed; scoring as a miss");
                (c.user.clone(), c.miss_rank(), None, Some(err.to_string()))
            }
        })
        .collect();
    outcomes.sort_by(|a, b| a.0.cmp(&b.0));

    let per_user = outcomes.iter().map(|(u, r, _, _)| (u.clone(), *r)).collect();
    let mut report = EvalReport::from_ranks(per_user);
    for (user, gt_rank, record, failure) in outcomes {
        match (record, failure) {
            (Some(rec), _) => report.rankings.push(rec),
            (None, Some(msg)) => {
                report.rankings.push(RankingRecord {
                    user_id: user.clone(),
                    order: Vec::new(),
                    gt_rank,
                    raw: String::new(),
                });
                report.failures.push((user, msg));
            }
            (None, None) => unreachable!(),
        }
    }
    report
}

/// Samples candidates for `users` and evaluates `ranker` on them.
pub fn evaluate<F, E>(split: &EvalSplit, ranker: F, users: &[UserId], seed: u64) -> Result<EvalReport, EvalError>
where
    F: Fn(&CandidateSet) -> Result<RankedList, E> + Sync,
    E: Display,
{
    let candidates = users
        .iter()
        .map(|u| sample_candidates(split, u, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate_candidates(&candidates, ranker))
}

/// Split where every target item is cold: all interactions with any target
/// item are removed from training histories. Items keep their descriptions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColdStartSplit {
    pub train: Catalog,
    pub targets: BTreeMap<UserId, ItemId>,
}

impl ColdStartSplit {
    pub fn as_eval_split(&self) -> EvalSplit {
        EvalSplit {
            train: self.train.clone(),
            targets: self.targets.clone(),
        }
    }
}

/// Removes every target item from every training history. Histories left
/// empty are dropped; their users stay in `targets`.
pub fn make_cold_start(split: &EvalSplit) -> ColdStartSplit {
    let cold: BTreeSet<&ItemId> = split.targets.values().collect();
    let histories = split
        .train
        .histories()
        .map(|h| {
            let kept = h.sequence.iter().filter(|i| !cold.contains(i)).cloned().collect();
            (h.user.clone(), kept)
        })
        .collect();
    ColdStartSplit {
        train: split.train.with_histories(histories),
        targets: split.targets.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{leave_one_out, Item, PurchaseHistory};

    fn catalog(n_items: usize, histories: &[(&str, &[usize])]) -> Catalog {
        Catalog::new(
            (0..n_items).map(|i| Item {
                id: ItemId::new(format!("i{i:02}")),
                description: format!("item {i}"),
            }),
            histories.iter().map(|(u, s)| PurchaseHistory {
                user: UserId::new(u),
                sequence: s.iter().map(|i| ItemId::new(format!("i{i:02}"))).collect(),
            }),
        )
        .unwrap()
    }

    #[test]
    fn metric_examples() {
        assert_eq!(hit_ratio_at_k(1, 1), 1.0);
        assert_eq!(hit_ratio_at_k(6, 5), 0.0);
        assert_eq!(hit_ratio_at_k(3, 3), 1.0);
        assert_eq!(ndcg_at_k(1, 3), 1.0);
        assert!((ndcg_at_k(2, 3) - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k(4, 3), 0.0);
    }

    #[test]
    fn report_from_two_users() {
        let r = EvalReport::from_ranks(vec![(UserId::new("a"), 1), (UserId::new("b"), 3)]);
        assert_eq!(r.hr[&1], 0.5);
        assert_eq!(r.hr[&3], 1.0);
        // (1 + 1/log2(4)) / 2
        assert!((r.ndcg[&3] - 0.75).abs() < 1e-12);
        let r2 = EvalReport::from_ranks(vec![(UserId::new("a"), 1), (UserId::new("b"), 2)]);
        assert!((r2.ndcg[&3] - 0.81546).abs() < 1e-5);
        let p = r2.presentation(serde_json::json!({}), 7);
        assert_eq!(p["hr"]["1"], 50.0);
        assert_eq!(p["ndcg"]["3"], 81.5);
        assert_eq!(p["seed"], 7);
    }

    #[test]
    fn forced_exhaustion_of_negatives() {
        // 11 items, user bought i00 then i01 (target); 9 items remain
        let split = leave_one_out(&catalog(11, &[("u", &[0, 1])]));
        let c = sample_candidates(&split, &UserId::new("u"), 3).unwrap();
        let negs: BTreeSet<&str> = c.negatives.iter().map(ItemId::as_str).collect();
        let expected: BTreeSet<String> = (2..11).map(|i| format!("i{i:02}")).collect();
        assert_eq!(negs, expected.iter().map(String::as_str).collect());
        let mut presented = c.presented_order.clone();
        presented.sort();
        let mut all = c.negatives.clone();
        all.push(c.ground_truth.clone());
        all.sort();
        assert_eq!(presented, all);
    }

    #[test]
    fn too_few_negatives_is_protocol_error() {
        let split = leave_one_out(&catalog(10, &[("u", &[0, 1])]));
        assert!(matches!(
            sample_candidates(&split, &UserId::new("u"), 3),
            Err(EvalError::NotEnoughNegatives { eligible: 8, .. })
        ));
        assert!(matches!(
            sample_candidates(&split, &UserId::new("nobody"), 3),
            Err(EvalError::UnknownUser(_))
        ));
    }

    #[test]
    fn candidate_sampling_is_seeded() {
        let split = leave_one_out(&catalog(40, &[("u", &[0, 1, 2, 3])]));
        let u = UserId::new("u");
        assert_eq!(sample_candidates(&split, &u, 5).unwrap(), sample_candidates(&split, &u, 5).unwrap());
        assert_ne!(sample_candidates(&split, &u, 5).unwrap(), sample_candidates(&split, &u, 6).unwrap());
    }

    #[test]
    fn user_sample_is_seeded_and_sorted() {
        let hs: Vec<(String, Vec<usize>)> = (0..50).map(|u| (format!("u{u:02}"), vec![0, 1])).collect();
        let refs: Vec<(&str, &[usize])> = hs.iter().map(|(u, s)| (u.as_str(), s.as_slice())).collect();
        let split = leave_one_out(&catalog(12, &refs));
        let a = sample_users(&split, 10, 1);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, sample_users(&split, 10, 1));
        assert_eq!(sample_users(&split, 100, 1).len(), 50);
    }

    #[test]
    fn perfect_ranker_and_failures() {
        let hs: Vec<(String, Vec<usize>)> = (0..5).map(|u| (format!("u{u}"), vec![u, u + 1])).collect();
        let refs: Vec<(&str, &[usize])> = hs.iter().map(|(u, s)| (u.as_str(), s.as_slice())).collect();
        let split = leave_one_out(&catalog(20, &refs));
        let users: Vec<UserId> = split.targets.keys().cloned().collect();
        let perfect = |c: &CandidateSet| -> Result<RankedList, String> {
            let mut order = vec![c.ground_truth.clone()];
            order.extend(c.negatives.iter().cloned());
            Ok(RankedList {
                order,
                raw_response: String::new(),
                repaired: false,
            })
        };
        let report = evaluate(&split, perfect, &users, 1).unwrap();
        assert_eq!(report, {
            let mut r = EvalReport::from_ranks(users.iter().map(|u| (u.clone(), 1)).collect());
            r.rankings = report.rankings.clone();
            r
        });
        assert!(report.hr.values().chain(report.ndcg.values()).all(|&v| v == 1.0));

        let failing = |c: &CandidateSet| -> Result<RankedList, String> {
            if c.user.as_str() == "u0" {
                Err("boom".into())
            } else {
                perfect(c)
            }
        };
        let report = evaluate(&split, failing, &users, 1).unwrap();
        assert_eq!(report.per_user[0], (UserId::new("u0"), 11));
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.hr[&5], 0.8);
    }

    #[test]
    fn cold_start_removes_targets_everywhere() {
        // u0's target i05 appears in three other histories
        let split = leave_one_out(&catalog(
            10,
            &[("u0", &[1, 5]), ("u1", &[5, 2, 3]), ("u2", &[2, 5, 4]), ("u3", &[5, 5, 6]), ("u4", &[5, 7])],
        ));
        let cold = make_cold_start(&split);
        let targets: BTreeSet<&ItemId> = cold.targets.values().collect();
        for h in cold.train.histories() {
            assert!(h.sequence.iter().all(|i| !targets.contains(i)), "{h:?}");
        }
        // u4's train history [i05] becomes empty and is dropped, target kept
        assert!(cold.train.history("u4").is_none());
        assert!(cold.targets.contains_key("u4"));
        assert_eq!(cold.train.n_items(), 10);
    }
}
