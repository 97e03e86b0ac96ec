//! Triplet, Triplet with semi-hard negative mining, NT-Xent and SmoothAP.
//!
//! Every loss is defined per query on a [`ScoreSet`]. The gradient with
//! respect to the query is a weighted sum of candidate differences, reported
//! as a list of [`GradientTerm`]s. Gradients are *loss descent* gradients,
//! i.e. the literal `dL/dq` an optimizer consumes, for a free query `q`
//! scored by dot product against fixed normalized candidates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::embedding::{Direction, Layout, RetrievalBatch, ScoreSet};
use crate::error::{Error, Result};
use crate::math;

/// Hyper-parameters of the four losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    /// Triplet margin.
    pub alpha: f64,
    /// NT-Xent softmax temperature.
    pub tau_ntxent: f64,
    /// SmoothAP sigmoid temperature.
    pub tau_smooth: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { alpha: 0.2, tau_ntxent: 0.1, tau_smooth: 0.01 }
    }
}

impl LossParams {
    pub fn new(alpha: f64, tau_ntxent: f64, tau_smooth: f64) -> Result<Self> {
        let p = Self { alpha, tau_ntxent, tau_smooth };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParams(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.tau_ntxent > 0.0 && self.tau_ntxent.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "tau_ntxent must be > 0, got {}",
                self.tau_ntxent
            )));
        }
        if !(self.tau_smooth > 0.0 && self.tau_smooth.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "tau_smooth must be > 0, got {}",
                self.tau_smooth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    Triplet,
    TripletSh,
    NtXent,
    SmoothAp,
}

impl LossKind {
    pub const ALL: [LossKind; 4] =
        [LossKind::Triplet, LossKind::TripletSh, LossKind::NtXent, LossKind::SmoothAp];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::TripletSh => "triplet_sh",
            LossKind::NtXent => "ntxent",
            LossKind::SmoothAp => "smooth_ap",
        }
    }

    /// SmoothAP ranks all captions of an image at once and therefore trains on
    /// grouped batches; the others iterate over image-caption pairs.
    pub fn uses_grouped_batches(self) -> bool {
        self == LossKind::SmoothAp
    }

    pub fn layout_name(self) -> &'static str {
        if self.uses_grouped_batches() {
            "grouped"
        } else {
            "pairwise"
        }
    }

    /// Coefficient of each per-query term in the batch objective: the triplet
    /// losses sum over queries, NT-Xent and SmoothAP average over `|B|`.
    pub fn query_coefficient(self, batch: &RetrievalBatch) -> f64 {
        match self {
            LossKind::Triplet | LossKind::TripletSh => 1.0,
            LossKind::NtXent | LossKind::SmoothAp => 1.0 / batch.size() as f64,
        }
    }

    pub fn check_layout(self, batch: &RetrievalBatch) -> Result<()> {
        let ok = match batch.layout() {
            Layout::Pairwise => !self.uses_grouped_batches(),
            Layout::Grouped { .. } => self.uses_grouped_batches(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::WrongLayout { expected: self.layout_name() })
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(LossKind::Triplet),
            "triplet_sh" | "triplet-sh" => Ok(LossKind::TripletSh),
            "ntxent" | "nt-xent" | "nt_xent" => Ok(LossKind::NtXent),
            "smooth_ap" | "smoothap" | "smooth-ap" => Ok(LossKind::SmoothAp),
            other => Err(Error::InvalidParams(format!("unknown loss `{other}`"))),
        }
    }
}

/// One weighted candidate difference in a query gradient.
///
/// The direction of a term is `v[negative] - v[positive]`, where a missing
/// side contributes nothing. For SmoothAP the `negative` slot may hold a
/// competing positive candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientTerm {
    pub positive: Option<u64>,
    pub negative: Option<u64>,
    pub weight: f64,
}

impl GradientTerm {
    fn pair(positive: u64, negative: u64, weight: f64) -> Self {
        Self { positive: Some(positive), negative: Some(negative), weight }
    }
}

/// Query gradient together with its decomposition into candidate terms.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub query_id: u64,
    pub grad: Vec<f64>,
    pub terms: Vec<GradientTerm>,
}

impl GradientReport {
    /// Number of terms with a non-zero weight.
    pub fn nonzero_terms(&self) -> usize {
        self.terms.iter().filter(|t| t.weight != 0.0).count()
    }
}

fn single_positive(s: &ScoreSet) -> Result<usize> {
    let n = s.num_positives();
    if n != 1 {
        return Err(Error::WrongPositiveCount { expected: 1, found: n });
    }
    if s.num_negatives() == 0 {
        return Err(Error::NoNegatives);
    }
    Ok(s.positive_indices().next().expect("one positive"))
}

/// Highest-scoring negative; ties resolve to the lowest candidate id.
fn hardest_negative(s: &ScoreSet) -> usize {
    let mut best: Option<usize> = None;
    for j in s.negative_indices() {
        if best.is_none_or(|b| s.score(j) > s.score(b)) {
            best = Some(j);
        }
    }
    best.expect("at least one negative")
}

/// `max(alpha - s+ + max(S_N), 0)`.
pub fn triplet_sh_loss(s: &ScoreSet, p: &LossParams) -> Result<f64> {
    let pos = single_positive(s)?;
    let neg = hardest_negative(s);
    Ok((p.alpha - s.score(pos) + s.score(neg)).max(0.0))
}

/// Sum over negatives of `max(alpha - s+ + s-, 0)`.
pub fn triplet_loss(s: &ScoreSet, p: &LossParams) -> Result<f64> {
    let pos = single_positive(s)?;
    let sp = s.score(pos);
    Ok(s.negative_indices().map(|j| (p.alpha - sp + s.score(j)).max(0.0)).sum())
}

/// Softmax of `scores / tau` and the index of the maximum, computed with the
/// max-shift identity.
pub(crate) fn softmax(s: &ScoreSet, tau: f64) -> (Vec<f64>, usize, f64) {
    let mut argmax = 0;
    for i in 1..s.len() {
        if s.score(i) > s.score(argmax) {
            argmax = i;
        }
    }
    let m = s.score(argmax) / tau;
    let mut w: Vec<f64> = (0..s.len()).map(|i| math::exp(s.score(i) / tau - m)).collect();
    // sum of the non-maximal terms, kept separately for log1p accuracy
    let rest: f64 = w.iter().enumerate().filter(|&(i, _)| i != argmax).map(|(_, x)| x).sum();
    let z = 1.0 + rest;
    for x in &mut w {
        *x /= z;
    }
    (w, argmax, rest)
}

/// Per-query NT-Xent term: `-log(exp(s+/tau) / sum_i exp(s_i/tau))` where the
/// sum runs over every candidate, the positive included.
pub fn ntxent_query_loss(s: &ScoreSet, p: &LossParams) -> Result<f64> {
    let n = s.num_positives();
    if n != 1 {
        return Err(Error::WrongPositiveCount { expected: 1, found: n });
    }
    let pos = s.positive_indices().next().expect("one positive");
    let tau = p.tau_ntxent;
    let (_, argmax, rest) = softmax(s, tau);
    let shift = s.score(argmax) / tau - s.score(pos) / tau;
    Ok(shift + math::ln_1p(rest))
}

/// NT-Xent over a pairwise batch: mean of the per-query terms over all `2n`
/// queries of both directions.
pub fn ntxent_loss(batch: &RetrievalBatch, p: &LossParams) -> Result<f64> {
    if batch.layout() != Layout::Pairwise {
        return Err(Error::WrongLayout { expected: "pairwise" });
    }
    if batch.images().is_empty() {
        return Err(Error::InvalidBatch("empty batch".into()));
    }
    let mut total = 0.0;
    for dir in Direction::BOTH {
        for s in batch.score_sets(dir)? {
            total += ntxent_query_loss(&s, p)?;
        }
    }
    Ok(total / batch.size() as f64)
}

/// Per-positive quantities of the smoothed AP: `(A_i, N_i)` where
/// `A_i = 1 + sum_{j in P, j != i} G(D_ij)` is the smooth rank among
/// positives and `N_i = sum_{j in N} G(D_ij)`, with `D_ij = s_j - s_i`.
fn smooth_ranks(s: &ScoreSet, i: usize, tau: f64) -> (f64, f64) {
    let si = s.score(i);
    let mut among_pos = 1.0;
    let mut among_neg = 0.0;
    for j in 0..s.len() {
        if j == i {
            continue;
        }
        let g = math::sigmoid(s.score(j) - si, tau);
        if s.is_positive(j) {
            among_pos += g;
        } else {
            among_neg += g;
        }
    }
    (among_pos, among_neg)
}

/// Smoothed average precision of one query, in `(0, 1]`.
pub fn smooth_ap_value(s: &ScoreSet, p: &LossParams) -> Result<f64> {
    let np = s.num_positives();
    if np == 0 {
        return Err(Error::NoPositives);
    }
    let tau = p.tau_smooth;
    let sum: f64 = s
        .positive_indices()
        .map(|i| {
            let (a, n) = smooth_ranks(s, i, tau);
            a / (a + n)
        })
        .sum();
    Ok(sum / np as f64)
}

/// Mean of `1 - smooth AP` over the queries of one direction of a grouped
/// batch. Image queries rank `k` positive captions, caption queries rank a
/// single positive image.
pub fn smooth_ap_batch_loss(
    batch: &RetrievalBatch,
    direction: Direction,
    p: &LossParams,
) -> Result<f64> {
    if !matches!(batch.layout(), Layout::Grouped { .. }) {
        return Err(Error::WrongLayout { expected: "grouped" });
    }
    let sets = batch.score_sets(direction)?;
    if sets.is_empty() {
        return Err(Error::InvalidBatch("empty batch".into()));
    }
    let mut total = 0.0;
    for s in &sets {
        total += 1.0 - smooth_ap_value(s, p)?;
    }
    Ok(total / sets.len() as f64)
}

/// Loss of a single query.
pub fn query_loss(kind: LossKind, s: &ScoreSet, p: &LossParams) -> Result<f64> {
    match kind {
        LossKind::Triplet => triplet_loss(s, p),
        LossKind::TripletSh => triplet_sh_loss(s, p),
        LossKind::NtXent => ntxent_query_loss(s, p),
        LossKind::SmoothAp => smooth_ap_value(s, p).map(|ap| 1.0 - ap),
    }
}

/// Batch objective used for training: per-query losses over both directions,
/// each scaled by [`LossKind::query_coefficient`].
///
/// Triplet queries without any negative (a one-pair batch) contribute zero.
pub fn batch_loss(kind: LossKind, batch: &RetrievalBatch, p: &LossParams) -> Result<f64> {
    kind.check_layout(batch)?;
    let c = kind.query_coefficient(batch);
    let mut total = 0.0;
    for dir in Direction::BOTH {
        for s in batch.score_sets(dir)? {
            if s.num_negatives() == 0 && matches!(kind, LossKind::Triplet | LossKind::TripletSh) {
                continue;
            }
            total += c * query_loss(kind, &s, p)?;
        }
    }
    Ok(total)
}

/// Triplet SH gradient terms: one unit-weight pair `(v+, v-)` with the hardest
/// negative when `s+ - s- < alpha`, nothing otherwise.
pub fn triplet_sh_terms(s: &ScoreSet, p: &LossParams) -> Result<Vec<GradientTerm>> {
    let pos = single_positive(s)?;
    let neg = hardest_negative(s);
    if s.score(pos) - s.score(neg) < p.alpha {
        Ok(vec![GradientTerm::pair(s.id(pos), s.id(neg), 1.0)])
    } else {
        Ok(Vec::new())
    }
}

/// Triplet gradient terms: one unit-weight pair per violating negative.
pub fn triplet_terms(s: &ScoreSet, p: &LossParams) -> Result<Vec<GradientTerm>> {
    let pos = single_positive(s)?;
    let sp = s.score(pos);
    Ok(s.negative_indices()
        .filter(|&j| sp - s.score(j) < p.alpha)
        .map(|j| GradientTerm::pair(s.id(pos), s.id(j), 1.0))
        .collect())
}

/// NT-Xent gradient terms: `(1 - softmax+)/tau` pulling toward the positive
/// and `softmax-/tau` pushing away from each negative.
pub fn ntxent_terms(s: &ScoreSet, p: &LossParams) -> Result<Vec<GradientTerm>> {
    let n = s.num_positives();
    if n != 1 {
        return Err(Error::WrongPositiveCount { expected: 1, found: n });
    }
    let pos = s.positive_indices().next().expect("one positive");
    let tau = p.tau_ntxent;
    let (w, _, _) = softmax(s, tau);
    let mut terms = Vec::with_capacity(s.len());
    terms.push(GradientTerm { positive: Some(s.id(pos)), negative: None, weight: (1.0 - w[pos]) / tau });
    for j in s.negative_indices() {
        terms.push(GradientTerm { positive: None, negative: Some(s.id(j)), weight: w[j] / tau });
    }
    Ok(terms)
}

/// SmoothAP gradient terms of `1 - AP`.
///
/// For positive `i` with smooth ranks `A_i` (among positives), `N_i`
/// (negatives ranked above) and `B_i = A_i + N_i`, every other candidate `j`
/// contributes a pair `(i, j)` weighted by `sim(D_ij) / (|P| B_i^2)` times
/// `A_i` for negatives or `-N_i` for positives, where `sim` is the sigmoid
/// slope. Zero-weight terms are dropped.
pub fn smooth_ap_terms(s: &ScoreSet, p: &LossParams) -> Result<Vec<GradientTerm>> {
    let np = s.num_positives();
    if np == 0 {
        return Err(Error::NoPositives);
    }
    let tau = p.tau_smooth;
    let mut terms = Vec::new();
    for i in s.positive_indices() {
        let (a, n) = smooth_ranks(s, i, tau);
        let b = a + n;
        let scale = 1.0 / (np as f64 * b * b);
        let si = s.score(i);
        for j in 0..s.len() {
            if j == i {
                continue;
            }
            let sim = math::sigmoid_slope(s.score(j) - si, tau);
            let factor = if s.is_positive(j) { -n } else { a };
            let weight = scale * factor * sim;
            if weight != 0.0 {
                terms.push(GradientTerm::pair(s.id(i), s.id(j), weight));
            }
        }
    }
    Ok(terms)
}

/// Gradient terms of a single query.
pub fn query_terms(kind: LossKind, s: &ScoreSet, p: &LossParams) -> Result<Vec<GradientTerm>> {
    match kind {
        LossKind::Triplet => triplet_terms(s, p),
        LossKind::TripletSh => triplet_sh_terms(s, p),
        LossKind::NtXent => ntxent_terms(s, p),
        LossKind::SmoothAp => smooth_ap_terms(s, p),
    }
}

/// `dL/ds_i` for every candidate of `s` (same order as `s.scores()`), read off
/// the gradient terms.
pub fn score_gradient(s: &ScoreSet, terms: &[GradientTerm]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; s.len()];
    for t in terms {
        if let Some(id) = t.negative {
            g[s.index_of(id).ok_or(Error::CandidateNotFound(id))?] += t.weight;
        }
        if let Some(id) = t.positive {
            g[s.index_of(id).ok_or(Error::CandidateNotFound(id))?] -= t.weight;
        }
    }
    Ok(g)
}

/// Sums `weight * (v[negative] - v[positive])` over `terms`.
pub fn assemble_gradient(
    s: &ScoreSet,
    batch: &RetrievalBatch,
    terms: &[GradientTerm],
) -> Result<Vec<f64>> {
    let dim = batch.dim().ok_or_else(|| Error::InvalidBatch("empty batch".into()))?;
    let dir = s.direction();
    let mut grad = vec![0.0; dim];
    let mut axpy = |id: u64, w: f64| -> Result<()> {
        let v = batch.candidate(dir, id).ok_or(Error::CandidateNotFound(id))?;
        for (g, x) in grad.iter_mut().zip(v.values()) {
            *g += w * x;
        }
        Ok(())
    };
    for t in terms {
        if let Some(id) = t.negative {
            axpy(id, t.weight)?;
        }
        if let Some(id) = t.positive {
            axpy(id, -t.weight)?;
        }
    }
    Ok(grad)
}

/// Query gradient of `kind` for score set `s`, whose candidates live in
/// `batch`.
pub fn query_grad(
    kind: LossKind,
    s: &ScoreSet,
    batch: &RetrievalBatch,
    p: &LossParams,
) -> Result<GradientReport> {
    let terms = query_terms(kind, s, p)?;
    if terms.iter().any(|t| !t.weight.is_finite()) {
        return Err(Error::NonFinite);
    }
    let grad = assemble_gradient(s, batch, &terms)?;
    Ok(GradientReport { query_id: s.query_id(), grad, terms })
}

/// Gradient of the Triplet SH loss: `v- - v+` for a violating query, zero
/// otherwise (also at the exact margin).
pub fn triplet_sh_grad(s: &ScoreSet, batch: &RetrievalBatch, p: &LossParams) -> Result<GradientReport> {
    query_grad(LossKind::TripletSh, s, batch, p)
}

/// Gradient of the Triplet loss: sum of `v- - v+` over violating negatives.
pub fn triplet_grad(s: &ScoreSet, batch: &RetrievalBatch, p: &LossParams) -> Result<GradientReport> {
    query_grad(LossKind::Triplet, s, batch, p)
}

/// Gradient of the per-query NT-Xent term.
pub fn ntxent_grad(s: &ScoreSet, batch: &RetrievalBatch, p: &LossParams) -> Result<GradientReport> {
    query_grad(LossKind::NtXent, s, batch, p)
}

/// Gradient of `1 - smooth AP` for one query.
pub fn smooth_ap_grad(s: &ScoreSet, batch: &RetrievalBatch, p: &LossParams) -> Result<GradientReport> {
    query_grad(LossKind::SmoothAp, s, batch, p)
}
