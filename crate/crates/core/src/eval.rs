//! Sampled-candidate ranking evaluation.
//!
//! Each held-out positive is ranked against 100 sampled negatives. Negatives
//! depend only on `(user, target, seed)`, so every model evaluated with the same
//! seed sees the same candidate sets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ItemId, Partition, SplitDataset, UserId};
use crate::models::Scorer;
use crate::seed::{self, stream};
use crate::{Error, Result};

pub const NUM_EVAL_NEGATIVES: usize = 100;
pub const NDCG_CUTOFF: usize = 10;

/// 1 + candidates scoring above the target + equal-scoring candidates with a lower id.
pub fn rank_from_scores(target: ItemId, target_score: f64, others: &[(ItemId, f64)]) -> usize {
    1 + others
        .iter()
        .filter(|&&(v, s)| s > target_score || (s == target_score && v < target))
        .count()
}

/// Rank of `target` among itself and `negatives`.
pub fn rank_target(
    scorer: &dyn Scorer,
    user: UserId,
    history: &[ItemId],
    target: ItemId,
    negatives: &[ItemId],
) -> Result<usize> {
    if negatives.contains(&target) {
        return Err(Error::invalid(format!("target {target} is among its own negatives")));
    }
    let mut candidates = Vec::with_capacity(negatives.len() + 1);
    candidates.push(target);
    candidates.extend_from_slice(negatives);
    let scores = scorer.score_candidates(user, history, &candidates)?;
    let others: Vec<(ItemId, f64)> = negatives.iter().copied().zip(scores[1..].iter().copied()).collect();
    Ok(rank_from_scores(target, scores[0], &others))
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// `100·(new − old)/old`; absent when `old ≤ 0`.
pub fn improvement(new: f64, old: f64) -> Option<f64> {
    (old > 0.0).then(|| 100.0 * (new - old) / old)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankedCase {
    pub user: UserId,
    pub item: ItemId,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ndcg_at_10: f64,
    pub hit_at_1: f64,
    pub num_users_evaluated: usize,
    pub ranks: Vec<RankedCase>,
}

impl MetricsReport {
    /// Average per-case metrics within each user, then across users.
    pub fn from_ranks(ranks: Vec<RankedCase>) -> Result<Self> {
        let mut users: Vec<UserId> = ranks.iter().map(|c| c.user).collect();
        users.sort_unstable();
        users.dedup();
        if users.is_empty() {
            return Err(Error::NoEvaluableUsers("given".into()));
        }
        let mut sums = vec![(0.0, 0.0, 0usize); users.len()];
        for c in &ranks {
            let idx = users.binary_search(&c.user).unwrap();
            let s = &mut sums[idx];
            s.0 += ndcg_at_k(c.rank, NDCG_CUTOFF);
            s.1 += f64::from(u8::from(c.rank == 1));
            s.2 += 1;
        }
        let n = users.len() as f64;
        let ndcg = sums.iter().map(|s| s.0 / s.2 as f64).sum::<f64>() / n;
        let hit = sums.iter().map(|s| s.1 / s.2 as f64).sum::<f64>() / n;
        Ok(MetricsReport {
            ndcg_at_10: ndcg,
            hit_at_1: hit,
            num_users_evaluated: users.len(),
            ranks,
        })
    }
}

/// Seed for the evaluation negatives of a split seed.
pub fn negatives_seed(seed: u64) -> u64 {
    seed::derive(seed, &[stream::EVAL_NEGATIVES])
}

/// nDCG@10 and Hit@1 over the positive held-out interactions of `partition`.
pub fn evaluate(scorer: &dyn Scorer, ds: &SplitDataset, partition: Partition, seed: u64) -> Result<MetricsReport> {
    if partition == Partition::Train {
        return Err(Error::invalid("evaluation partition must be validation or test"));
    }
    let neg_seed = negatives_seed(seed);
    let mut ranks = Vec::new();
    for case in ds.eval_cases(partition) {
        let negatives = ds.sample_negatives(case.user, case.item, NUM_EVAL_NEGATIVES, neg_seed)?;
        let rank = rank_target(scorer, case.user, &case.history, case.item, &negatives)?;
        ranks.push(RankedCase {
            user: case.user,
            item: case.item,
            rank,
        });
    }
    if ranks.is_empty() {
        return Err(Error::NoEvaluableUsers(partition.to_string()));
    }
    MetricsReport::from_ranks(ranks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    #[serde(rename = "ndcg@10")]
    pub ndcg_at_10: f64,
    #[serde(rename = "hit@1")]
    pub hit_at_1: f64,
    pub num_users: usize,
    pub model: String,
    pub partition: String,
    pub seed: u64,
}

impl MetricsFile {
    pub fn new(report: &MetricsReport, model: &str, partition: Partition, seed: u64) -> Self {
        MetricsFile {
            ndcg_at_10: report.ndcg_at_10,
            hit_at_1: report.hit_at_1,
            num_users: report.num_users_evaluated,
            model: model.to_string(),
            partition: partition.to_string(),
            seed,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One line of a comparison report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub ndcg_at_10: f64,
    pub hit_at_1: f64,
}

/// `variant,ndcg@10,hit@1,imp_ndcg_pct,imp_hit_pct`, improvements against `base`.
pub fn report_csv(base: &ReportRow, rows: &[ReportRow]) -> String {
    let fmt_imp = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
    let mut out = String::from("variant,ndcg@10,hit@1,imp_ndcg_pct,imp_hit_pct\n");
    for r in std::iter::once(base).chain(rows) {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.variant,
            r.ndcg_at_10,
            r.hit_at_1,
            fmt_imp(improvement(r.ndcg_at_10, base.ndcg_at_10)),
            fmt_imp(improvement(r.hit_at_1, base.hit_at_1)),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Interaction, SplitProtocol};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn ndcg_closed_forms() {
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert!((ndcg_at_k(3, 10) - 0.5).abs() < 1e-12);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
    }

    #[test]
    fn rank_examples() {
        let others: Vec<(usize, f64)> = (1..=100).map(|v| (v, 0.0)).collect();
        assert_eq!(rank_from_scores(0, 1.0, &others), 1);
        assert_eq!(rank_from_scores(200, -1.0, &others), 101);
        let mut tie = others.clone();
        tie[0] = (1, 5.0);
        assert_eq!(rank_from_scores(50, 5.0, &tie), 2);
        assert_eq!(rank_from_scores(0, 5.0, &tie), 1);
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement(0.3781, 0.3647).unwrap() - 3.674).abs() < 0.01);
        assert!((improvement(0.1683, 0.1490).unwrap() - 12.95).abs() < 0.01);
        assert_eq!(improvement(0.2, 0.2), Some(0.0));
        assert_eq!(improvement(0.2, 0.0), None);
    }

    struct Oracle(Vec<ItemId>);
    impl Scorer for Oracle {
        fn name(&self) -> &str {
            "oracle"
        }
        fn num_items(&self) -> usize {
            200
        }
        fn score_candidates(&self, user: UserId, _h: &[ItemId], c: &[ItemId]) -> Result<Vec<f64>> {
            Ok(c.iter().map(|&v| f64::from(u8::from(v == self.0[user]))).collect())
        }
    }

    struct Noise(u64);
    impl Scorer for Noise {
        fn name(&self) -> &str {
            "noise"
        }
        fn num_items(&self) -> usize {
            200
        }
        fn score_candidates(&self, user: UserId, _h: &[ItemId], c: &[ItemId]) -> Result<Vec<f64>> {
            let mut rng = seed::rng(self.0, &[user as u64]);
            Ok(c.iter().map(|_| rng.random::<f64>()).collect())
        }
    }

    fn dataset(users: usize) -> SplitDataset {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for u in 0..users {
            train.push(Interaction::rated(u, u % 200, 5, 0).unwrap());
            test.push(Interaction::rated(u, (u + 7) % 200, 5, 1).unwrap());
        }
        SplitDataset::from_partitions(train, vec![], test, users, 200, 10, SplitProtocol::LeaveOneOut).unwrap()
    }

    #[test]
    fn perfect_ranker_scores_one() {
        let ds = dataset(20);
        let oracle = Oracle((0..20).map(|u| (u + 7) % 200).collect());
        let r = evaluate(&oracle, &ds, Partition::Test, 1).unwrap();
        assert_eq!((r.ndcg_at_10, r.hit_at_1, r.num_users_evaluated), (1.0, 1.0, 20));
    }

    #[test]
    fn random_scorer_hit_rate_matches_expectation() {
        let ds = dataset(10_000);
        let r = evaluate(&Noise(4), &ds, Partition::Test, 2).unwrap();
        let expected: f64 = 1.0 / 101.0;
        let sd = (expected * (1.0 - expected) / 10_000.0).sqrt();
        assert!((r.hit_at_1 - expected).abs() < 4.0 * sd, "{}", r.hit_at_1);
    }

    #[test]
    fn empty_partition_errors() {
        let ds = dataset(3);
        assert!(matches!(
            evaluate(&Noise(0), &ds, Partition::Validation, 0),
            Err(Error::NoEvaluableUsers(_))
        ));
    }

    #[test]
    fn metrics_file_keys() {
        let report = MetricsReport::from_ranks(vec![RankedCase {
            user: 0,
            item: 0,
            rank: 3,
        }])
        .unwrap();
        let f = MetricsFile::new(&report, "mf", Partition::Test, 7);
        let v: serde_json::Value = serde_json::to_value(&f).unwrap();
        for key in ["ndcg@10", "hit@1", "num_users", "model", "partition", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["partition"], "test");
    }

    #[test]
    fn report_csv_layout() {
        let base = ReportRow {
            variant: "base".into(),
            ndcg_at_10: 0.5,
            hit_at_1: 0.25,
        };
        let row = ReportRow {
            variant: "D1".into(),
            ndcg_at_10: 0.55,
            hit_at_1: 0.25,
        };
        let csv = report_csv(&base, &[row]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "variant,ndcg@10,hit@1,imp_ndcg_pct,imp_hit_pct");
        assert_eq!(lines[2], "D1,0.550000,0.250000,10.0000,0.0000");
    }

    proptest! {
        #[test]
        fn ndcg_non_increasing(rank in 1usize..200, k in 1usize..120) {
            prop_assert!(ndcg_at_k(rank + 1, k) <= ndcg_at_k(rank, k));
            prop_assert_eq!(ndcg_at_k(rank, 1) == 1.0, rank == 1);
        }

        #[test]
        fn metrics_in_unit_interval(ranks in prop::collection::vec((0usize..5, 1usize..102), 1..50)) {
            let cases = ranks.into_iter().map(|(user, rank)| RankedCase { user, item: 0, rank }).collect();
            let r = MetricsReport::from_ranks(cases).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.ndcg_at_10));
            prop_assert!(r.hit_at_1 <= r.ndcg_at_10 + 1e-12);
        }
    }
}
