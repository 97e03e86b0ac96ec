//! Counts and weights of candidates that contribute to the query gradient.
//!
//! All functions work on already encoded batches and one retrieval
//! direction. Hinge losses count candidates with non-zero gradient, NT-Xent
//! counts negatives whose softmax weight exceeds `epsilon`, SmoothAP counts
//! pairs whose sigmoid slope, damped by the squared exact rank of the
//! positive, exceeds `epsilon`.

use alloc::vec::Vec;

use crate::embedding::{Direction, Layout, RetrievalBatch, ScoreSet};
use crate::error::{Error, Result};
use crate::losses::{softmax, LossKind, LossParams};
use crate::math;
use crate::metrics::rank_of;
use crate::stats::mean_std;
use crate::synth::{derive_seed, sample_batches, SynthDataset};
use crate::trainer::EncoderPair;

fn require_pairwise(batch: &RetrievalBatch) -> Result<()> {
    match batch.layout() {
        Layout::Pairwise => Ok(()),
        Layout::Grouped { .. } => Err(Error::WrongLayout { expected: "pairwise" }),
    }
}

fn single_positive(s: &ScoreSet) -> Result<usize> {
    let n = s.num_positives();
    if n != 1 {
        return Err(Error::WrongPositiveCount { expected: 1, found: n });
    }
    Ok(s.positive_indices().next().expect("one positive"))
}

/// 1 if the query's positive is within `alpha` of its hardest negative.
pub fn triplet_sh_query_count(s: &ScoreSet, p: &LossParams) -> Result<usize> {
    let pos = single_positive(s)?;
    let hardest = s.negative_indices().map(|j| s.score(j)).fold(f64::NEG_INFINITY, f64::max);
    Ok(usize::from(s.num_negatives() > 0 && s.score(pos) - hardest < p.alpha))
}

/// Number of negatives within `alpha` of the query's positive.
pub fn triplet_query_count(s: &ScoreSet, p: &LossParams) -> Result<usize> {
    let pos = single_positive(s)?;
    let sp = s.score(pos);
    Ok(s.negative_indices().filter(|&j| sp - s.score(j) < p.alpha).count())
}

/// Queries of `direction` whose Triplet SH gradient is non-zero.
pub fn count_triplet_sh(batch: &RetrievalBatch, direction: Direction, p: &LossParams) -> Result<usize> {
    require_pairwise(batch)?;
    let mut total = 0;
    for s in batch.score_sets(direction)? {
        total += triplet_sh_query_count(&s, p)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletCounts {
    pub per_query: Vec<usize>,
    pub c_batch: usize,
    pub c_zero: usize,
}

impl TripletCounts {
    pub fn c_q(&self) -> f64 {
        self.c_batch as f64 / self.per_query.len().max(1) as f64
    }
}

pub fn count_triplet(batch: &RetrievalBatch, direction: Direction, p: &LossParams) -> Result<TripletCounts> {
    require_pairwise(batch)?;
    let per_query = batch
        .score_sets(direction)?
        .iter()
        .map(|s| triplet_query_count(s, p))
        .collect::<Result<Vec<_>>>()?;
    let c_batch = per_query.iter().sum();
    let c_zero = per_query.iter().filter(|&&c| c == 0).count();
    Ok(TripletCounts { per_query, c_batch, c_zero })
}

/// Per-query NT-Xent statistics; weights are softmax probabilities, without
/// the `1/tau` gradient factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NtXentQuery {
    /// Negatives with softmax weight above `epsilon`.
    pub c_neg: usize,
    /// Summed softmax weight of those negatives.
    pub w_neg: f64,
    /// `1 - softmax weight of the positive`.
    pub w_pos: f64,
}

pub fn ntxent_query_counts(s: &ScoreSet, p: &LossParams, epsilon: f64) -> Result<NtXentQuery> {
    let pos = single_positive(s)?;
    let (w, _, _) = softmax(s, p.tau_ntxent);
    let mut out = NtXentQuery { c_neg: 0, w_neg: 0.0, w_pos: 1.0 - w[pos] };
    for j in s.negative_indices() {
        if w[j] > epsilon {
            out.c_neg += 1;
            out.w_neg += w[j];
        }
    }
    Ok(out)
}

/// Batch means of the per-query NT-Xent statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NtXentCounts {
    pub per_query: Vec<NtXentQuery>,
    pub c_qv_neg: f64,
    pub w_qv_neg: f64,
    pub w_qv_pos: f64,
}

pub fn count_ntxent(
    batch: &RetrievalBatch,
    direction: Direction,
    p: &LossParams,
    epsilon: f64,
) -> Result<NtXentCounts> {
    require_pairwise(batch)?;
    let per_query = batch
        .score_sets(direction)?
        .iter()
        .map(|s| ntxent_query_counts(s, p, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let n = per_query.len().max(1) as f64;
    let mean = |f: fn(&NtXentQuery) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    Ok(NtXentCounts {
        c_qv_neg: mean(|q| q.c_neg as f64),
        w_qv_neg: mean(|q| q.w_neg),
        w_qv_pos: mean(|q| q.w_pos),
        per_query,
    })
}

/// Average over positives `i` of the number of other candidates `j` with
/// `sim(s_j - s_i) / R(i)^2 > epsilon`, `R` the exact rank of `i`.
pub fn smooth_ap_query_count(s: &ScoreSet, p: &LossParams, epsilon: f64) -> Result<f64> {
    let np = s.num_positives();
    if np == 0 {
        return Err(Error::NoPositives);
    }
    let mut total = 0usize;
    for i in s.positive_indices() {
        let r = rank_of(s.id(i), s)? as f64;
        let si = s.score(i);
        total += (0..s.len())
            .filter(|&j| j != i && math::sigmoid_slope(s.score(j) - si, p.tau_smooth) / (r * r) > epsilon)
            .count();
    }
    Ok(total as f64 / np as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothApCounts {
    pub per_query: Vec<f64>,
    pub c_zero: usize,
}

impl SmoothApCounts {
    pub fn c_q(&self) -> f64 {
        self.per_query.iter().sum::<f64>() / self.per_query.len().max(1) as f64
    }
}

pub fn count_smooth_ap(
    batch: &RetrievalBatch,
    direction: Direction,
    p: &LossParams,
    epsilon: f64,
) -> Result<SmoothApCounts> {
    if !matches!(batch.layout(), Layout::Grouped { .. }) {
        return Err(Error::WrongLayout { expected: "grouped" });
    }
    let per_query = batch
        .score_sets(direction)?
        .iter()
        .map(|s| smooth_ap_query_count(s, p, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let c_zero = per_query.iter().filter(|&&c| c == 0.0).count();
    Ok(SmoothApCounts { per_query, c_zero })
}

/// One statistic across batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: &'static str,
    pub per_batch: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Series {
    fn new(name: &'static str, per_batch: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_batch);
        Self { name, per_batch, mean, std }
    }
}

/// Statistic names reported for each loss, in output order.
pub fn statistic_names(loss: LossKind) -> &'static [&'static str] {
    match loss {
        LossKind::TripletSh => &["c_q", "c_batch", "c_zero"],
        LossKind::Triplet => &["c_q", "c_batch", "c_zero"],
        LossKind::NtXent => &["c_qv_neg", "w_qv_neg", "w_qv_pos"],
        LossKind::SmoothAp => &["c_smooth_q", "c_smooth_zero"],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocosReport {
    pub loss: LossKind,
    pub direction: Direction,
    pub epsilon: f64,
    pub batch_n: usize,
    pub queries_per_batch: usize,
    pub stats: Vec<Series>,
}

impl CocosReport {
    pub fn stat(&self, name: &str) -> Option<&Series> {
        self.stats.iter().find(|s| s.name == name)
    }

    pub fn num_batches(&self) -> usize {
        self.stats.first().map_or(0, |s| s.per_batch.len())
    }

    /// Statistics of `loss` over already encoded batches.
    pub fn from_batches(
        loss: LossKind,
        direction: Direction,
        batches: &[RetrievalBatch],
        p: &LossParams,
        epsilon: f64,
    ) -> Result<Self> {
        let first = batches.first().ok_or(Error::EmptyDataset)?;
        let queries_per_batch = first.queries(direction).len();
        let names = statistic_names(loss);
        let mut columns: Vec<Vec<f64>> = names.iter().map(|_| Vec::with_capacity(batches.len())).collect();
        for b in batches {
            let row: Vec<f64> = match loss {
                LossKind::TripletSh => {
                    let c = count_triplet_sh(b, direction, p)?;
                    let nq = b.queries(direction).len();
                    alloc::vec![c as f64 / nq as f64, c as f64, (nq - c) as f64]
                }
                LossKind::Triplet => {
                    let c = count_triplet(b, direction, p)?;
                    alloc::vec![c.c_q(), c.c_batch as f64, c.c_zero as f64]
                }
                LossKind::NtXent => {
                    let c = count_ntxent(b, direction, p, epsilon)?;
                    alloc::vec![c.c_qv_neg, c.w_qv_neg, c.w_qv_pos]
                }
                LossKind::SmoothAp => {
                    let c = count_smooth_ap(b, direction, p, epsilon)?;
                    alloc::vec![c.c_q(), c.c_zero as f64]
                }
            };
            for (col, v) in columns.iter_mut().zip(row) {
                col.push(v);
            }
        }
        let stats = names.iter().zip(columns).map(|(&n, c)| Series::new(n, c)).collect();
        Ok(Self { loss, direction, epsilon, batch_n: first.images().len(), queries_per_batch, stats })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CocosConfig {
    pub epsilon: f64,
    /// Pairs per batch (pairwise losses) or images per batch (SmoothAP).
    pub batch_n: usize,
    pub seed: u64,
}

impl Default for CocosConfig {
    fn default() -> Self {
        Self { epsilon: 0.01, batch_n: 128, seed: 0 }
    }
}

/// Freezes `encoders`, walks the training split once in shuffled batches of
/// `config.batch_n` (the last partial batch is dropped) and reports the
/// statistics of `loss` for both directions.
pub fn cocos_protocol(
    encoders: &EncoderPair,
    dataset: &SynthDataset,
    loss: LossKind,
    params: &LossParams,
    config: &CocosConfig,
) -> Result<[CocosReport; 2]> {
    let layout = if loss.uses_grouped_batches() {
        crate::synth::BatchLayout::Grouped
    } else {
        crate::synth::BatchLayout::Pairwise
    };
    let raw = sample_batches(dataset, layout, config.batch_n, derive_seed(config.seed, 0xC0C0))?;
    let encoded = raw
        .iter()
        .filter(|b| b.images().len() == config.batch_n)
        .map(|b| encoders.encode_batch(b))
        .collect::<Result<Vec<_>>>()?;
    if encoded.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok([
        CocosReport::from_batches(loss, Direction::I2T, &encoded, params, config.epsilon)?,
        CocosReport::from_batches(loss, Direction::T2I, &encoded, params, config.epsilon)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::test_support::*;
    use crate::embedding::{normalize, EmbeddingVector, Modality};
    use crate::losses::{triplet_grad, triplet_sh_grad};
    use crate::synth::{generate, SynthConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::vec;
    use std::vec::Vec;

    fn p() -> LossParams {
        LossParams::default()
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&EmbeddingVector::new(0, Modality::Image, v).unwrap()).unwrap().into_values()
    }

    fn random_pairwise(n: usize, d: usize, seed: u64) -> RetrievalBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let caps: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let ir: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
        let cr: Vec<&[f64]> = caps.iter().map(|v| v.as_slice()).collect();
        pairwise(&ir, &cr)
    }

    fn random_grouped(n: usize, k: usize, d: usize, seed: u64) -> RetrievalBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        grouped(n, k, |_, _| unit(&mut rng, d))
    }

    fn set(scores: &[f64], positives: &[usize]) -> ScoreSet {
        let s = scores.iter().enumerate().map(|(i, &x)| (i as u64, x)).collect();
        ScoreSet::new(0, Direction::I2T, s, positives.iter().map(|&i| i as u64)).unwrap()
    }

    #[test]
    fn triplet_examples() {
        let s = set(&[0.5, 0.9, 0.8, 0.1], &[0]);
        assert_eq!(triplet_query_count(&s, &p()).unwrap(), 2);
        assert_eq!(triplet_sh_query_count(&s, &p()).unwrap(), 1);
        let sep = set(&[0.9, 0.1, 0.2], &[0]);
        assert_eq!(triplet_query_count(&sep, &p()).unwrap(), 0);
        assert_eq!(triplet_sh_query_count(&sep, &p()).unwrap(), 0);
        let all = set(&[0.0, 0.5, 0.4, 0.3], &[0]);
        assert_eq!(triplet_query_count(&all, &p()).unwrap(), 3);
    }

    #[test]
    fn random_init_violates_nearly_everywhere() {
        let mut total = 0;
        for seed in 0..20 {
            total += count_triplet_sh(&random_pairwise(128, 32, seed), Direction::I2T, &p()).unwrap();
        }
        assert!(total as f64 / 20.0 > 0.95 * 128.0);
    }

    #[test]
    fn separated_batch_counts_nothing() {
        let b = pairwise(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[1.0, 0.0], &[0.0, 1.0]]);
        for dir in Direction::BOTH {
            assert_eq!(count_triplet_sh(&b, dir, &p()).unwrap(), 0);
            let c = count_triplet(&b, dir, &p()).unwrap();
            assert_eq!((c.c_batch, c.c_zero), (0, 2));
        }
    }

    #[test]
    fn layouts_are_checked() {
        let g = random_grouped(3, 2, 4, 0);
        assert!(count_triplet(&g, Direction::I2T, &p()).is_err());
        assert!(count_triplet_sh(&g, Direction::I2T, &p()).is_err());
        assert!(count_ntxent(&g, Direction::I2T, &p(), 0.01).is_err());
        assert!(count_smooth_ap(&random_pairwise(3, 4, 0), Direction::I2T, &p(), 0.01).is_err());
    }

    #[test]
    fn ntxent_uniform_scores() {
        let s = set(&[0.3; 5], &[2]);
        let q = ntxent_query_counts(&s, &p(), 0.1).unwrap();
        assert_eq!(q.c_neg, 4);
        assert_abs_diff_eq!(q.w_neg, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(q.w_pos, 0.8, epsilon = 1e-12);
        assert_eq!(ntxent_query_counts(&s, &p(), 0.25).unwrap().c_neg, 0);
    }

    #[test]
    fn smooth_ap_examples() {
        // saturated: gaps of 1 at tau 0.01
        let s = set(&[3.0, 2.0, 1.0], &[0]);
        assert_eq!(smooth_ap_query_count(&s, &p(), 0.01).unwrap(), 0.0);
        // a tie: sim(0) = 1 / (4 tau) = 25 at rank 1
        let tie = set(&[0.5, 0.5], &[0]);
        assert_eq!(smooth_ap_query_count(&tie, &p(), 0.01).unwrap(), 1.0);
        assert_abs_diff_eq!(math::sigmoid_slope(0.0, 0.01), 25.0, epsilon = 1e-12);
        let sat = grouped(2, 2, |m, id| match (m, id) {
            (Modality::Image, 0) | (Modality::Caption, 0 | 1) => vec![1.0, 0.0],
            _ => vec![0.0, 1.0],
        });
        for dir in Direction::BOTH {
            let c = count_smooth_ap(&sat, dir, &p(), 0.01).unwrap();
            // positives tied with each other still count in i2t
            if dir == Direction::T2I {
                assert_eq!(c.c_zero, 4);
            } else {
                assert_eq!(c.per_query, [1.0, 1.0]);
            }
        }
    }

    #[test]
    fn one_batch_has_zero_std_and_duplicates_too() {
        let b = random_pairwise(8, 4, 3);
        let one = CocosReport::from_batches(LossKind::Triplet, Direction::I2T, core::slice::from_ref(&b), &p(), 0.01).unwrap();
        let c = count_triplet(&b, Direction::I2T, &p()).unwrap();
        assert_eq!(one.stat("c_batch").unwrap().mean, c.c_batch as f64);
        assert_eq!(one.stat("c_batch").unwrap().std, 0.0);
        let two = CocosReport::from_batches(LossKind::NtXent, Direction::T2I, &[b.clone(), b], &p(), 0.01).unwrap();
        assert!(two.stats.iter().all(|s| s.std == 0.0));
        assert!(CocosReport::from_batches(LossKind::NtXent, Direction::T2I, &[], &p(), 0.01).is_err());
    }

    #[test]
    fn protocol_drops_partial_batches() {
        let ds = generate(&SynthConfig { num_tuples: 50, captions_per_image: 2, seed: 1, ..Default::default() }).unwrap();
        let enc = EncoderPair::init(ds.latent_dim(), 8, 0).unwrap();
        // 40 train tuples -> 80 pairs -> 2 full batches of 32
        let cfg = CocosConfig { batch_n: 32, ..Default::default() };
        let [i2t, t2i] = cocos_protocol(&enc, &ds, LossKind::Triplet, &p(), &cfg).unwrap();
        assert_eq!((i2t.num_batches(), t2i.num_batches()), (2, 2));
        assert_eq!(i2t.queries_per_batch, 32);
        let [g, _] = cocos_protocol(&enc, &ds, LossKind::SmoothAp, &p(), &CocosConfig { batch_n: 16, ..cfg }).unwrap();
        assert_eq!((g.num_batches(), g.queries_per_batch), (2, 16));
        let too_big = CocosConfig { batch_n: 1000, ..cfg };
        assert_eq!(cocos_protocol(&enc, &ds, LossKind::Triplet, &p(), &too_big), Err(Error::EmptyDataset));
        assert_eq!(
            cocos_protocol(&enc, &ds, LossKind::Triplet, &p(), &cfg),
            cocos_protocol(&enc, &ds, LossKind::Triplet, &p(), &cfg)
        );
    }

    proptest! {
        #[test]
        fn triplet_count_equals_nonzero_gradient_terms(seed in 0u64..10_000, n in 2usize..12) {
            let b = random_pairwise(n, 3, seed);
            for dir in Direction::BOTH {
                let c = count_triplet(&b, dir, &p()).unwrap();
                let mut terms = 0;
                let mut sh = 0;
                for s in b.score_sets(dir).unwrap() {
                    terms += triplet_grad(&s, &b, &p()).unwrap().nonzero_terms();
                    sh += triplet_sh_grad(&s, &b, &p()).unwrap().nonzero_terms();
                    prop_assert!(triplet_sh_query_count(&s, &p()).unwrap() <= 1);
                }
                prop_assert_eq!(c.c_batch, terms);
                prop_assert_eq!(count_triplet_sh(&b, dir, &p()).unwrap(), sh);
                prop_assert!(c.c_zero <= n);
            }
        }

        #[test]
        fn raising_epsilon_never_increases_counts(seed in 0u64..10_000, e1 in 0.0f64..0.5, e2 in 0.0f64..0.5) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let pw = random_pairwise(6, 3, seed);
            let gr = random_grouped(3, 2, 3, seed);
            for dir in Direction::BOTH {
                let a = count_ntxent(&pw, dir, &p(), lo).unwrap();
                let b = count_ntxent(&pw, dir, &p(), hi).unwrap();
                prop_assert!(b.c_qv_neg <= a.c_qv_neg);
                let a = count_smooth_ap(&gr, dir, &p(), lo).unwrap();
                let b = count_smooth_ap(&gr, dir, &p(), hi).unwrap();
                prop_assert!(b.c_q() <= a.c_q());
                prop_assert!(b.c_zero >= a.c_zero);
            }
        }

        #[test]
        fn zero_epsilon_counts_everything(seed in 0u64..10_000) {
            let pw = random_pairwise(7, 3, seed);
            let gr = random_grouped(3, 2, 3, seed);
            for dir in Direction::BOTH {
                let c = count_ntxent(&pw, dir, &p(), 0.0).unwrap();
                prop_assert_eq!(c.c_qv_neg, 6.0);
                let c = count_smooth_ap(&gr, dir, &p(), 0.0).unwrap();
                let others = (gr.candidates(dir).len() - 1) as f64;
                prop_assert!(c.per_query.iter().all(|&x| x == others));
            }
        }

        #[test]
        fn ntxent_weights_partition_unity(seed in 0u64..10_000, eps in 0.0f64..0.3) {
            let b = random_pairwise(6, 3, seed);
            let tau = p().tau_ntxent;
            for dir in Direction::BOTH {
                for s in b.score_sets(dir).unwrap() {
                    let q = ntxent_query_counts(&s, &p(), eps).unwrap();
                    let (w, _, _) = softmax(&s, tau);
                    let below: f64 = s.negative_indices().filter(|&j| w[j] <= eps).map(|j| w[j]).sum();
                    let pos = s.positive_indices().next().unwrap();
                    prop_assert!((q.w_neg + w[pos] + below - 1.0).abs() < 1e-12);
                    prop_assert!((0.0..=1.0).contains(&q.w_pos));
                }
            }
        }
    }
}
