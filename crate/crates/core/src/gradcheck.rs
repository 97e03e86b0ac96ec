//! Central finite-difference oracle for the analytic query gradients.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedding::{
    normalize, score_set, Direction, EmbeddingVector, Layout, Modality, RetrievalBatch, ScoreSet,
};
use crate::error::{Error, Result};
use crate::losses::{query_grad, query_loss, LossKind, LossParams};

/// `(f(q + h e_i) - f(q - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad<F>(f: F, q: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParams("step must be > 0".into()));
    }
    let mut x = q.to_vec();
    let mut grad = Vec::with_capacity(q.len());
    for i in 0..q.len() {
        x[i] = q[i] + h;
        let up = f(&x);
        x[i] = q[i] - h;
        let down = f(&x);
        x[i] = q[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteFunctionValue { coordinate: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Five-point central differences,
/// `(8(f(q + h e_i) - f(q - h e_i)) - (f(q + 2h e_i) - f(q - 2h e_i))) / 12h`.
/// Truncation error is `O(h^4)`, which matters for sharp sigmoids.
pub fn finite_difference_grad_4<F>(f: F, q: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParams("step must be > 0".into()));
    }
    let mut x = q.to_vec();
    let mut grad = Vec::with_capacity(q.len());
    for i in 0..q.len() {
        let mut at = |t: f64| {
            x[i] = q[i] + t;
            f(&x)
        };
        let vals = [at(h), at(-h), at(2.0 * h), at(-2.0 * h)];
        x[i] = q[i];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFunctionValue { coordinate: i });
        }
        grad.push((8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * h));
    }
    Ok(grad)
}

/// Finite-difference stencil used by [`check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    ThreePoint,
    FivePoint,
}

/// Largest coordinate error between two gradients, absolute and relative to
/// `max(|analytic|_inf, |numeric|_inf, 1e-8)`, plus the worst coordinate.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> (f64, f64, usize) {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1e-8f64, |m, x| m.max(x.abs()));
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = (a - n).abs();
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    (worst.0 / scale, worst.0, worst.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub dim: usize,
    pub trials: usize,
    pub tolerance: f64,
    pub abs_floor: f64,
    pub step: f64,
    pub seed: u64,
    /// Upper bound on candidates per query.
    pub max_candidates: usize,
    pub stencil: Stencil,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            trials: 100,
            tolerance: 1e-5,
            abs_floor: 1e-10,
            step: 1e-5,
            seed: 0,
            max_candidates: 12,
            stencil: Stencil::FivePoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub loss: LossKind,
    /// Worst relative error over trials whose absolute error exceeds the
    /// floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Trials accepted on absolute error alone (gradient at round-off level).
    pub below_floor: usize,
    /// `(trial, coordinate)` of the largest absolute error.
    pub worst: Option<(usize, usize)>,
    pub trials_checked: usize,
    /// Instances too close to a hinge kink to be differentiable.
    pub skipped: usize,
    /// Instances whose loss evaluation failed (e.g. non-finite values).
    pub failed: usize,
    pub pass: bool,
}

/// One random query with its batch.
#[derive(Debug, Clone)]
pub struct Instance {
    pub batch: RetrievalBatch,
    pub query: EmbeddingVector,
    pub direction: Direction,
}

impl Instance {
    pub fn scores(&self) -> Result<ScoreSet> {
        score_set(&self.query, &self.batch, self.direction)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random instance: unit candidates spread around a common direction (so
/// scores range from well separated to nearly tied), and an unnormalized
/// query drawn from the batch's query side.
pub fn random_instance(
    kind: LossKind,
    dim: usize,
    max_candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Instance> {
    let direction = if rng.random::<bool>() { Direction::I2T } else { Direction::T2I };
    let center = gaussian(rng, dim);
    let spread = libm::exp(rng.random_range(libm::log(0.02)..0.0));
    let draw = |rng: &mut ChaCha8Rng, id: u64, modality: Modality| -> Result<EmbeddingVector> {
        let noise = gaussian(rng, dim);
        let v: Vec<f64> = center.iter().zip(&noise).map(|(c, e)| c + 4.0 * spread * e).collect();
        normalize(&EmbeddingVector::new(id, modality, v)?)
    };
    let max_c = max_candidates.max(2);
    let (n, k) = if kind.uses_grouped_batches() {
        let n = rng.random_range(2..=4usize.min(max_c));
        let k = rng.random_range(1..=(max_c / n).clamp(1, 3));
        (n, k)
    } else {
        (rng.random_range(2..=max_c), 1)
    };
    let mut images = Vec::new();
    let mut captions = Vec::new();
    let mut map = alloc::collections::BTreeMap::new();
    for i in 0..n as u64 {
        images.push(draw(rng, i, Modality::Image)?);
        let ids: Vec<u64> = (0..k as u64).map(|j| i * k as u64 + j).collect();
        for &c in &ids {
            captions.push(draw(rng, c, Modality::Caption)?);
        }
        map.insert(i, ids);
    }
    let layout = if kind.uses_grouped_batches() { Layout::Grouped { k } } else { Layout::Pairwise };
    let batch = RetrievalBatch::new(images, captions, map, layout)?;
    let queries = batch.queries(direction);
    let base = &queries[rng.random_range(0..queries.len())];
    let scale = rng.random_range(0.5..1.5);
    let query = base.with_values(base.values().iter().map(|x| x * scale).collect())?;
    Ok(Instance { batch, query, direction })
}

/// Whether a hinge loss is within `margin` of a non-differentiable point.
fn near_kink(kind: LossKind, s: &ScoreSet, alpha: f64, margin: f64) -> bool {
    if !matches!(kind, LossKind::Triplet | LossKind::TripletSh) {
        return false;
    }
    let Some(pos) = s.positive_indices().next() else { return false };
    let sp = s.score(pos);
    let mut negs: Vec<f64> = s.negative_indices().map(|j| s.score(j)).collect();
    if negs.iter().any(|&sn| (sp - sn - alpha).abs() <= margin) {
        return true;
    }
    if kind == LossKind::TripletSh && negs.len() > 1 {
        negs.sort_by(|a, b| b.total_cmp(a));
        return negs[0] - negs[1] <= margin;
    }
    false
}

/// Compares the analytic query gradient of `kind` against central finite
/// differences on `trials` seeded random instances.
pub fn check(kind: LossKind, params: &LossParams, cfg: &GradCheckConfig) -> Result<GradCheckResult> {
    if cfg.trials == 0 {
        return Err(Error::InvalidParams("trials must be >= 1".into()));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = GradCheckResult {
        loss: kind,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        below_floor: 0,
        worst: None,
        trials_checked: 0,
        skipped: 0,
        failed: 0,
        pass: true,
    };
    for trial in 0..cfg.trials {
        let inst = random_instance(kind, cfg.dim, cfg.max_candidates, &mut rng)?;
        let s = inst.scores()?;
        if near_kink(kind, &s, params.alpha, 10.0 * cfg.step) {
            out.skipped += 1;
            continue;
        }
        let analytic = match query_grad(kind, &s, &inst.batch, params) {
            Ok(r) => r.grad,
            Err(_) => {
                out.failed += 1;
                continue;
            }
        };
        let f = |x: &[f64]| -> f64 {
            inst.query
                .with_values(x.to_vec())
                .and_then(|q| score_set(&q, &inst.batch, inst.direction))
                .and_then(|s| query_loss(kind, &s, params))
                .unwrap_or(f64::NAN)
        };
        let numeric = match cfg.stencil {
            Stencil::ThreePoint => finite_difference_grad(f, inst.query.values(), cfg.step),
            Stencil::FivePoint => finite_difference_grad_4(f, inst.query.values(), cfg.step),
        };
        let numeric = match numeric {
            Ok(g) => g,
            Err(_) => {
                out.failed += 1;
                continue;
            }
        };
        let (rel, abs, coord) = compare(&analytic, &numeric);
        out.trials_checked += 1;
        if abs <= cfg.abs_floor {
            out.below_floor += 1;
        } else if rel > out.max_rel_error || rel.is_nan() {
            out.max_rel_error = rel;
        }
        if abs > out.max_abs_error || abs.is_nan() {
            out.max_abs_error = abs;
            out.worst = Some((trial, coord));
        }
    }
    out.pass = out.failed == 0 && out.trials_checked > 0 && out.max_rel_error <= cfg.tolerance;
    Ok(out)
}

/// Runs [`check`] for every loss at each of `dims`.
pub fn check_all(params: &LossParams, dims: &[usize], base: &GradCheckConfig) -> Result<Vec<(usize, GradCheckResult)>> {
    let mut out = vec![];
    for &dim in dims {
        for kind in LossKind::ALL {
            let cfg = GradCheckConfig { dim, ..*base };
            out.push((dim, check(kind, params, &cfg)?));
        }
    }
    Ok(out)
}
