//! Exact ranking metrics: rank, AP, Recall@k, AP@k and corpus evaluation.
//!
//! [`rank_of`] counts strictly higher-scored competitors only, so tied
//! candidates share the better rank. Top-k lists ([`recall_at_k`],
//! [`ap_at_k`]) are materialized by descending score with ties broken by
//! ascending candidate id.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::embedding::{Direction, RetrievalBatch, ScoreSet};
use crate::error::{Error, Result};

/// Cut-offs reported for Recall@k.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// `1 + #{j != i : s_j > s_i}` over the whole candidate set.
pub fn rank_of(candidate: u64, s: &ScoreSet) -> Result<usize> {
    let i = s.index_of(candidate).ok_or(Error::CandidateNotFound(candidate))?;
    Ok(rank_in(s, i, |_| true))
}

fn rank_in<F: Fn(usize) -> bool>(s: &ScoreSet, i: usize, member: F) -> usize {
    let si = s.score(i);
    1 + (0..s.len()).filter(|&j| j != i && member(j) && si - s.score(j) < 0.0).count()
}

/// Average precision `(1/|P|) sum_i R(i, P) / R(i, Omega)`.
pub fn exact_ap(s: &ScoreSet) -> Result<f64> {
    let np = s.num_positives();
    if np == 0 {
        return Err(Error::NoPositives);
    }
    let sum: f64 = s
        .positive_indices()
        .map(|i| rank_in(s, i, |j| s.is_positive(j)) as f64 / rank_in(s, i, |_| true) as f64)
        .sum();
    Ok(sum / np as f64)
}

/// Candidate indices by descending score; ties by ascending id.
pub fn ranking(s: &ScoreSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    // candidates are already in id order, so a stable sort keeps id order on ties
    order.sort_by(|&a, &b| s.score(b).total_cmp(&s.score(a)));
    order
}

/// Whether at least one positive appears in the materialized top-k.
pub fn recall_at_k(s: &ScoreSet, k: usize) -> Result<bool> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be >= 1".into()));
    }
    if s.num_positives() == 0 {
        return Err(Error::NoPositives);
    }
    Ok(ranking(s).iter().take(k).any(|&i| s.is_positive(i)))
}

/// AP truncated at k: `(1/min(|P|, k)) sum_{positives at position r <= k}
/// (#positives at positions <= r) / r`.
pub fn ap_at_k(s: &ScoreSet, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParams("k must be >= 1".into()));
    }
    let np = s.num_positives();
    if np == 0 {
        return Err(Error::NoPositives);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &i) in ranking(s).iter().take(k).enumerate() {
        if s.is_positive(i) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / np.min(k) as f64)
}

/// Corpus-level retrieval quality for one direction. Values are fractions in
/// `[0, 1]`; the `*_percent` accessors scale them for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
    pub map_at_5: f64,
    pub num_queries: usize,
}

impl RetrievalMetrics {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    pub fn recall_percent(&self, k: usize) -> Option<f64> {
        self.recall(k).map(|r| 100.0 * r)
    }

    /// Mean of R@1, R@5 and R@10 in percent.
    pub fn average_recall(&self) -> f64 {
        self.rsum() / RECALL_KS.len() as f64
    }

    /// R@1 + R@5 + R@10 of this direction, in percent.
    pub fn rsum(&self) -> f64 {
        RECALL_KS.iter().filter_map(|&k| self.recall_percent(k)).sum()
    }

    pub fn map_at_5_percent(&self) -> f64 {
        100.0 * self.map_at_5
    }
}

/// The six-recall sum over both directions.
pub fn rsum(i2t: &RetrievalMetrics, t2i: &RetrievalMetrics) -> f64 {
    i2t.rsum() + t2i.rsum()
}

/// Evaluates every query of `direction` in `corpus` against the full
/// candidate pool.
pub fn evaluate(corpus: &RetrievalBatch, direction: Direction) -> Result<RetrievalMetrics> {
    let sets = corpus.score_sets(direction)?;
    if sets.is_empty() || corpus.candidates(direction).is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut hits = [0usize; RECALL_KS.len()];
    let mut ap_sum = 0.0;
    for s in &sets {
        let order = ranking(s);
        let first_hit = order.iter().position(|&i| s.is_positive(i)).ok_or(Error::NoPositives)?;
        for (h, &k) in hits.iter_mut().zip(&RECALL_KS) {
            if first_hit < k {
                *h += 1;
            }
        }
        ap_sum += ap_at_k(s, 5)?;
    }
    let n = sets.len() as f64;
    let recall_at = RECALL_KS.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n)).collect();
    Ok(RetrievalMetrics { direction, recall_at, map_at_5: ap_sum / n, num_queries: sets.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::test_support::*;
    use crate::embedding::Modality;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::vec;

    fn set(scores: &[f64], positives: &[usize]) -> ScoreSet {
        let s = scores.iter().enumerate().map(|(i, &x)| (i as u64, x)).collect();
        ScoreSet::new(0, Direction::I2T, s, positives.iter().map(|&i| i as u64)).unwrap()
    }

    /// Sort candidates, walk the list and average the precision at each
    /// positive. Independent of the rank-counting formula.
    fn brute_force_ap(scores: &[f64], positives: &[usize]) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let mut hits = 0;
        let mut sum = 0.0;
        for (r, i) in order.iter().enumerate() {
            if positives.contains(i) {
                hits += 1;
                sum += hits as f64 / (r + 1) as f64;
            }
        }
        sum / positives.len() as f64
    }

    #[test]
    fn rank_examples() {
        let s = set(&[0.9, 0.7, 0.5], &[0]);
        assert_eq!(rank_of(2, &s).unwrap(), 3);
        assert_eq!(rank_of(0, &s).unwrap(), 1);
        let flat = set(&[0.4, 0.4, 0.4, 0.4], &[1]);
        for id in 0..4 {
            assert_eq!(rank_of(id, &flat).unwrap(), 1);
        }
        assert_eq!(rank_of(9, &s), Err(Error::CandidateNotFound(9)));
    }

    #[test]
    fn exact_ap_examples() {
        assert_eq!(exact_ap(&set(&[0.9, 0.8, 0.1, 0.0], &[0, 1])).unwrap(), 1.0);
        assert_abs_diff_eq!(exact_ap(&set(&[0.9, 0.7, 0.5], &[0, 2])).unwrap(), 5.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(exact_ap(&set(&[0.9, 0.7, 0.5, 0.1], &[3])).unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(exact_ap(&set(&[0.1], &[])), Err(Error::NoPositives));
    }

    #[test]
    fn recall_examples() {
        assert!(recall_at_k(&set(&[0.9, 0.1], &[0]), 1).unwrap());
        // positive ranked 7th of 10
        let scores: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 * 0.1).collect();
        let s = set(&scores, &[6]);
        assert!(!recall_at_k(&s, 5).unwrap());
        assert!(recall_at_k(&s, 10).unwrap());
        // five positives, best at rank 4
        let s = set(&scores, &[3, 5, 7, 8, 9]);
        assert!(!recall_at_k(&s, 1).unwrap());
        assert!(recall_at_k(&s, 5).unwrap());
        assert!(recall_at_k(&s, 0).is_err());
    }

    #[test]
    fn recall_ties_break_by_id() {
        // positive id 1 ties with negative id 0 at the top
        let s = set(&[0.5, 0.5, 0.1], &[1]);
        assert_eq!(rank_of(1, &s).unwrap(), 1);
        assert!(!recall_at_k(&s, 1).unwrap());
        assert!(recall_at_k(&s, 2).unwrap());
    }

    #[test]
    fn ap_at_k_examples() {
        let scores: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 * 0.1).collect();
        assert_eq!(ap_at_k(&set(&scores, &[0, 1, 2, 3, 4]), 5).unwrap(), 1.0);
        assert_eq!(ap_at_k(&set(&scores, &[7, 8]), 5).unwrap(), 0.0);
        assert_abs_diff_eq!(ap_at_k(&set(&scores, &[1, 3]), 5).unwrap(), 0.5, epsilon = 1e-15);
    }

    fn onehot(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn evaluate_perfect_retrieval() {
        let b = grouped(4, 2, |m, id| onehot(4, if m == Modality::Image { id } else { id / 2 } as usize));
        for dir in Direction::BOTH {
            let m = evaluate(&b, dir).unwrap();
            for k in RECALL_KS {
                assert_eq!(m.recall_percent(k), Some(100.0));
            }
            assert_eq!(m.average_recall(), 100.0);
            assert_eq!(m.map_at_5, 1.0);
        }
    }

    #[test]
    fn evaluate_single_query_matches_query_values() {
        let b = pairwise(&[&[1.0, 0.2]], &[&[0.3, 1.0]]);
        let m = evaluate(&b, Direction::I2T).unwrap();
        let s = b.score_sets(Direction::I2T).unwrap().remove(0);
        assert_eq!(m.recall(1), Some(if recall_at_k(&s, 1).unwrap() { 1.0 } else { 0.0 }));
        assert_eq!(m.map_at_5, ap_at_k(&s, 5).unwrap());
        assert_eq!(m.num_queries, 1);
    }

    #[test]
    fn evaluate_random_embeddings_near_chance() {
        use rand::{Rng, SeedableRng};
        // t2i with a single positive among n images: E[R@1] = 1/n
        let n = 100;
        let mut total = 0.0;
        for seed in 0..8 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = grouped(n, 1, |_, _| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
            total += evaluate(&b, Direction::T2I).unwrap().recall(1).unwrap();
        }
        let mean = total / 8.0;
        // Monte-Carlo std of the mean is about sqrt(0.01 * 0.99 / 800) = 0.0035
        assert!((mean - 0.01).abs() < 0.012, "{mean}");
    }

    #[test]
    fn evaluate_empty_corpus() {
        let b = RetrievalBatch::new(vec![], vec![], BTreeMap::new(), crate::Layout::Pairwise).unwrap();
        assert_eq!(evaluate(&b, Direction::I2T), Err(Error::EmptyCorpus));
    }

    fn distinct_scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::btree_set(0u32..10_000, 1..=12)
            .prop_map(|s| s.into_iter().map(|x| x as f64 / 10_000.0).collect::<Vec<_>>())
            .prop_shuffle()
    }

    proptest! {
        #[test]
        fn exact_ap_matches_sort_oracle(scores in distinct_scores(), mask in any::<u16>()) {
            let mut positives: Vec<usize> = (0..scores.len()).filter(|i| mask >> i & 1 == 1).collect();
            if positives.is_empty() {
                positives.push(0);
            }
            let s = set(&scores, &positives);
            prop_assert!((exact_ap(&s).unwrap() - brute_force_ap(&scores, &positives)).abs() < 1e-12);
        }

        #[test]
        fn recall_monotone_in_k(scores in distinct_scores(), pos in 0usize..12) {
            let s = set(&scores, &[pos % scores.len()]);
            let mut prev = false;
            for k in 1..=scores.len() + 1 {
                let r = recall_at_k(&s, k).unwrap();
                prop_assert!(r || !prev);
                prev = r;
            }
            prop_assert!(prev);
        }

        #[test]
        fn single_positive_ap_is_reciprocal_rank(scores in distinct_scores(), pos in 0usize..12) {
            let p = pos % scores.len();
            let s = set(&scores, &[p]);
            let r = rank_of(p as u64, &s).unwrap();
            prop_assert!((exact_ap(&s).unwrap() - 1.0 / r as f64).abs() < 1e-15);
        }

        #[test]
        fn rank_invariant_under_monotone_maps(scores in prop::collection::vec(-1.0f64..1.0, 1..12)) {
            let s = set(&scores, &[0]);
            let mapped: Vec<f64> = scores.iter().map(|x| 3.0 * x * x * x + x - 0.5).collect();
            let t = set(&mapped, &[0]);
            for id in 0..scores.len() as u64 {
                prop_assert_eq!(rank_of(id, &s).unwrap(), rank_of(id, &t).unwrap());
            }
        }
    }
}
