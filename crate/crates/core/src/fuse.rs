//! Rank fusion of two explainers and the aggregation baselines.
//!
//! Ranks are 1-based with 1 the most important edge. Fused outputs are
//! turned back into scores (`|E| - position` in the fused order) so the
//! extraction strategies can consume them like any other explanation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::EdgeSelection;

/// Default agreement window, in percent of `|E|`.
pub const DEFAULT_THRESHOLD: f64 = 10.0;

fn same_len(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            lhs: vec![a],
            rhs: vec![b],
        });
    }
    Ok(())
}

/// Rank 1 for the highest score, ties broken by lower edge index.
pub fn scores_to_ranks(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score of edge {i}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (pos, &e) in order.iter().enumerate() {
        ranks[e] = pos + 1;
    }
    Ok(ranks)
}

/// Scores that reproduce `order` (best first) under descending sort.
pub fn order_to_scores(order: &[usize]) -> Vec<f64> {
    let n = order.len();
    let mut scores = vec![0.0; n];
    for (pos, &e) in order.iter().enumerate() {
        scores[e] = (n - pos) as f64;
    }
    scores
}

/// Per-edge fused rank values. Within the agreement window `T * |E| / 100`
/// the larger (more conservative) rank wins, otherwise the rank of the more
/// accurate explainer is kept.
pub fn rankfusion(r1: &[usize], r2: &[usize], a1: f64, a2: f64, t: f64) -> Result<Vec<usize>> {
    same_len(r1.len(), r2.len(), "rankfusion")?;
    if !(0.0..=100.0).contains(&t) {
        return Err(Error::invalid(format!("threshold must lie in [0, 100], got {t}")));
    }
    let tau = t * r1.len() as f64 / 100.0;
    Ok(r1
        .iter()
        .zip(r2)
        .map(|(&x, &y)| {
            if (x.abs_diff(y) as f64) <= tau {
                x.max(y)
            } else if a1 >= a2 {
                x
            } else {
                y
            }
        })
        .collect())
}

/// Edges best first: smaller fused value, then smaller mean of the two
/// input ranks, then lower index.
pub fn fused_order(fused: &[usize], r1: &[usize], r2: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fused.len()).collect();
    order.sort_by_key(|&e| (fused[e], r1[e] + r2[e], e));
    order
}

/// Fuse two score vectors and return scores for extraction.
pub fn rankfusion_scores(s1: &[f64], s2: &[f64], a1: f64, a2: f64, t: f64) -> Result<Vec<f64>> {
    let r1 = scores_to_ranks(s1)?;
    let r2 = scores_to_ranks(s2)?;
    let fused = rankfusion(&r1, &r2, a1, a2, t)?;
    Ok(order_to_scores(&fused_order(&fused, &r1, &r2)))
}

/// Mean accuracy per explainer over a common sparsity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    /// Ascending sparsity levels, percent.
    pub sparsities: Vec<f64>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopTwo {
    pub first: String,
    pub second: String,
    /// Accuracy of `first` at each sparsity.
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

/// Pick the two explainers with the highest mean accuracy over the grid.
/// Ties go to the higher accuracy at the smallest sparsity, then to name
/// order.
pub fn select_top2(table: &AccuracyTable) -> Result<TopTwo> {
    if table.rows.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least two explainers to fuse, got {}",
            table.rows.len()
        )));
    }
    let first_col = table
        .sparsities
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::invalid("accuracy table has no sparsity levels"))?;
    let mut ranked: Vec<(&String, f64, f64)> = Vec::new();
    for (name, row) in &table.rows {
        same_len(row.len(), table.sparsities.len(), "select_top2")?;
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        ranked.push((name, mean, row[first_col]));
    }
    // BTreeMap iteration is name-ordered and the sort is stable
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.total_cmp(&a.2)));
    let (first, second) = (ranked[0].0.clone(), ranked[1].0.clone());
    Ok(TopTwo {
        a1: table.rows[&first].clone(),
        a2: table.rows[&second].clone(),
        first,
        second,
    })
}

fn min_max(s: &[f64]) -> Vec<f64> {
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.5; s.len()];
    }
    s.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Elementwise mean of the two min-max normalized score vectors.
pub fn mean_aggregate(s1: &[f64], s2: &[f64]) -> Result<Vec<f64>> {
    same_len(s1.len(), s2.len(), "mean_aggregate")?;
    if let Some(i) = s1.iter().chain(s2).position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("aggregated score {i}")));
    }
    let (a, b) = (min_max(s1), min_max(s2));
    Ok(a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect())
}

/// Edges best first for a two-of-three vote among top-`k` sets: majority
/// edges by mean rank, then the rest by mean rank.
fn vote_order(s: [&[f64]; 3], k: usize) -> Result<Vec<usize>> {
    same_len(s[0].len(), s[1].len(), "rank_vote")?;
    same_len(s[0].len(), s[2].len(), "rank_vote")?;
    let n = s[0].len();
    let ranks = [
        scores_to_ranks(s[0])?,
        scores_to_ranks(s[1])?,
        scores_to_ranks(s[2])?,
    ];
    let mean_key = |e: usize| ranks[0][e] + ranks[1][e] + ranks[2][e];
    let votes = |e: usize| ranks.iter().filter(|r| r[e] <= k).count();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&e| (votes(e) < 2, mean_key(e), e));
    Ok(order)
}

fn clamp_k(k: usize, n: usize) -> usize {
    if k > n {
        log::warn!("k = {k} exceeds the {n} available edges; using {n}");
        n
    } else {
        k
    }
}

/// Two-of-three majority among the top-`k` edges of three explainers,
/// trimmed or filled to exactly `k` edges by mean rank.
pub fn rank_vote(s1: &[f64], s2: &[f64], s3: &[f64], k: usize) -> Result<EdgeSelection> {
    let n = s1.len();
    let k = clamp_k(k, n);
    let order = vote_order([s1, s2, s3], k)?;
    EdgeSelection::new(order[..k].to_vec(), n)
}

/// Scores whose top-`k` set is the vote selection at `k`.
pub fn rank_vote_scores(s1: &[f64], s2: &[f64], s3: &[f64], k: usize) -> Result<Vec<f64>> {
    let k = clamp_k(k, s1.len());
    Ok(order_to_scores(&vote_order([s1, s2, s3], k)?))
}

/// Majority edges only, without fill or trim.
pub fn majority_set(s1: &[f64], s2: &[f64], s3: &[f64], k: usize) -> Result<BTreeSet<usize>> {
    let k = clamp_k(k, s1.len());
    let r = [scores_to_ranks(s1)?, scores_to_ranks(s2)?, scores_to_ranks(s3)?];
    Ok((0..s1.len())
        .filter(|&e| r.iter().filter(|x| x[e] <= k).count() >= 2)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks_examples() {
        assert_eq!(scores_to_ranks(&[0.9, 0.1, 0.5]).unwrap(), vec![1, 3, 2]);
        assert_eq!(scores_to_ranks(&[0.2; 4]).unwrap(), vec![1, 2, 3, 4]);
        assert!(scores_to_ranks(&[0.1, f64::NAN]).is_err());
    }

    #[test]
    fn rankfusion_hand_trace() {
        // n = 10, T = 20, so tau = 2
        let r1: Vec<usize> = (1..=10).collect();
        let mut r2 = r1.clone();
        r2.swap(0, 1);
        let f = rankfusion(&r1, &r2, 0.9, 0.8, 20.0).unwrap();
        assert_eq!(&f[..3], &[2, 2, 3]);

        let mut r2 = r1.clone();
        r2.swap(0, 4);
        // edge 0 has ranks (1, 5): d = 4 > 2 and A1 >= A2 keeps 1
        let f = rankfusion(&r1, &r2, 0.8, 0.8, 20.0).unwrap();
        assert_eq!(f[0], 1);
        assert_eq!(f[4], 5);
        let f = rankfusion(&r1, &r2, 0.7, 0.8, 20.0).unwrap();
        assert_eq!(f[0], 5);
        assert_eq!(f[4], 1);
    }

    #[test]
    fn rankfusion_extremes() {
        let a = [3, 1, 4, 2];
        let b = [1, 4, 2, 3];
        assert_eq!(rankfusion(&a, &b, 0.1, 0.9, 100.0).unwrap(), vec![3, 4, 4, 3]);
        for t in [0.0, 35.0, 100.0] {
            assert_eq!(rankfusion(&a, &a, 0.2, 0.9, t).unwrap(), a.to_vec());
        }
        assert!(rankfusion(&a, &b[..3], 0.5, 0.5, 10.0).is_err());
        assert!(rankfusion(&a, &b, 0.5, 0.5, 101.0).is_err());
    }

    #[test]
    fn fused_ties_use_mean_then_index() {
        // fused values all 3 after T = 100: mean ranks decide
        let r1 = [1, 3, 2];
        let r2 = [3, 1, 3];
        let fused = rankfusion(&r1, &r2, 0.5, 0.5, 100.0).unwrap();
        assert_eq!(fused, vec![3, 3, 3]);
        assert_eq!(fused_order(&fused, &r1, &r2), vec![0, 1, 2]);
        let scores = rankfusion_scores(&[0.9, 0.1, 0.5], &[0.1, 0.9, 0.05], 0.5, 0.5, 100.0).unwrap();
        assert_eq!(scores, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn top2_selection() {
        let mut rows = BTreeMap::new();
        rows.insert("gbp".to_string(), vec![0.8, 0.9]);
        rows.insert("ig".to_string(), vec![0.85, 0.95]);
        rows.insert("saliency".to_string(), vec![0.5, 0.6]);
        let table = AccuracyTable {
            sparsities: vec![5.0, 10.0],
            rows,
        };
        let top = select_top2(&table).unwrap();
        assert_eq!((top.first.as_str(), top.second.as_str()), ("ig", "gbp"));
        assert_eq!(top.a1, vec![0.85, 0.95]);

        // equal means, split by the smallest sparsity then by name
        let mut rows = BTreeMap::new();
        rows.insert("b".to_string(), vec![0.6, 0.8]);
        rows.insert("a".to_string(), vec![0.6, 0.8]);
        rows.insert("c".to_string(), vec![0.7, 0.7]);
        let top = select_top2(&AccuracyTable {
            sparsities: vec![5.0, 10.0],
            rows,
        })
        .unwrap();
        assert_eq!((top.first.as_str(), top.second.as_str()), ("c", "a"));

        let mut one = BTreeMap::new();
        one.insert("ig".to_string(), vec![1.0]);
        assert!(select_top2(&AccuracyTable {
            sparsities: vec![5.0],
            rows: one
        })
        .is_err());
    }

    #[test]
    fn mean_aggregate_examples() {
        assert_eq!(mean_aggregate(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = [2.0, 4.0, 3.0];
        assert_eq!(mean_aggregate(&s, &s).unwrap(), vec![0.0, 1.0, 0.5]);
        assert_eq!(mean_aggregate(&[3.0, 3.0], &[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert!(mean_aggregate(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rank_vote_examples() {
        let s = [0.5, 0.9, 0.1, 0.7];
        assert_eq!(rank_vote(&s, &s, &s, 2).unwrap().indices(), &[1, 3]);
        assert_eq!(rank_vote(&s, &s, &s, 9).unwrap().len(), 4);

        // disjoint top-1 sets: no majority, fill by mean rank
        let a = [0.9, 0.5, 0.1, 0.0];
        let b = [0.5, 0.9, 0.0, 0.1];
        let c = [0.0, 0.1, 0.9, 0.5];
        assert!(majority_set(&a, &b, &c, 1).unwrap().is_empty());
        // ranks: a (1,2,3,4) b (2,1,4,3) c (4,3,1,2); sums 7, 6, 8, 9
        assert_eq!(rank_vote(&a, &b, &c, 1).unwrap().indices(), &[1]);
        assert_eq!(rank_vote(&a, &b, &c, 2).unwrap().indices(), &[0, 1]);
        let scores = rank_vote_scores(&a, &b, &c, 1).unwrap();
        assert_eq!(scores[1], 4.0);
    }

    proptest! {
        #[test]
        fn ranks_sort_scores(s in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let r = scores_to_ranks(&s).unwrap();
            let mut by_rank: Vec<usize> = (0..s.len()).collect();
            by_rank.sort_by_key(|&e| r[e]);
            for w in by_rank.windows(2) {
                prop_assert!(s[w[0]] >= s[w[1]]);
            }
            let mut sorted = r.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (1..=s.len()).collect::<Vec<_>>());
        }

        #[test]
        fn mean_aggregate_in_unit_range(
            pair in (1usize..30).prop_flat_map(|n| (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            ))
        ) {
            let out = mean_aggregate(&pair.0, &pair.1).unwrap();
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn fused_topk_is_nested(
            pair in (2usize..30).prop_flat_map(|n| (
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(-1.0f64..1.0, n),
                0.0f64..100.0,
            ))
        ) {
            let scores = rankfusion_scores(&pair.0, &pair.1, 0.6, 0.4, pair.2).unwrap();
            let r = scores_to_ranks(&scores).unwrap();
            // distinct integer scores give a strict total order
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            prop_assert_eq!(sorted.len(), scores.len());
            for k in 1..scores.len() {
                let top: BTreeSet<usize> = (0..scores.len()).filter(|&e| r[e] <= k).collect();
                let next: BTreeSet<usize> = (0..scores.len()).filter(|&e| r[e] <= k + 1).collect();
                prop_assert!(top.is_subset(&next));
            }
        }

        #[test]
        fn zero_threshold_follows_better_explainer(perm in Just((1usize..=12).collect::<Vec<_>>()).prop_shuffle()) {
            let r1: Vec<usize> = perm.clone();
            let r2: Vec<usize> = perm.iter().map(|&x| 13 - x).collect();
            let f = rankfusion(&r1, &r2, 0.9, 0.1, 0.0).unwrap();
            for e in 0..12 {
                if r1[e] != r2[e] {
                    prop_assert_eq!(f[e], r1[e]);
                }
            }
        }
    }
}
