//! Linear dual encoder trained by plain minibatch gradient descent.
//!
//! Each modality has its own `d_out x d_in` matrix; an embedding is the
//! unit-normalized product `W x`. Gradients are exact: score gradients from
//! the loss closed forms are pushed through the dot products, the
//! normalization Jacobian and the linear map.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{Direction, EmbeddingVector, Modality, RetrievalBatch};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, query_terms, score_gradient, LossKind, LossParams};
use crate::math;
use crate::metrics::{self, RetrievalMetrics};
use crate::synth::{derive_seed, sample_batches, BatchLayout, Split, SynthDataset};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::DimensionMismatch { left: rows * cols, right: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch { left: self.cols, right: x.len() });
        }
        Ok((0..self.rows).map(|r| math::dot(self.row(r), x)).collect())
    }

    /// `self += scale * u x^T`.
    fn add_outer(&mut self, scale: f64, u: &[f64], x: &[f64]) {
        for (r, &ur) in u.iter().enumerate() {
            let a = scale * ur;
            if a == 0.0 {
                continue;
            }
            for (w, &xc) in self.data[r * self.cols..(r + 1) * self.cols].iter_mut().zip(x) {
                *w += a * xc;
            }
        }
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Image and caption encoders; no shared parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub image: Matrix,
    pub caption: Matrix,
}

impl EncoderPair {
    /// Uniform entries in `[-1/sqrt(d_in), 1/sqrt(d_in)]`, image matrix first.
    pub fn init(d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::InvalidConfig("encoder dims must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / math::sqrt(d_in as f64);
        let mut draw = || {
            let data = (0..d_in * d_out).map(|_| rng.random_range(-bound..=bound)).collect();
            Matrix { rows: d_out, cols: d_in, data }
        };
        let image = draw();
        let caption = draw();
        Ok(Self { image, caption })
    }

    pub fn new(image: Matrix, caption: Matrix) -> Result<Self> {
        if image.cols != caption.cols || image.rows != caption.rows {
            return Err(Error::DimensionMismatch { left: image.data.len(), right: caption.data.len() });
        }
        Ok(Self { image, caption })
    }

    pub fn d_in(&self) -> usize {
        self.image.cols
    }

    pub fn d_out(&self) -> usize {
        self.image.rows
    }

    pub fn weights(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Image => &self.image,
            Modality::Caption => &self.caption,
        }
    }

    fn weights_mut(&mut self, modality: Modality) -> &mut Matrix {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Caption => &mut self.caption,
        }
    }

    /// Unnormalized output `W x`.
    pub fn project(&self, modality: Modality, x: &[f64]) -> Result<Vec<f64>> {
        self.weights(modality).mul_vec(x)
    }

    /// Unit-norm embedding of a raw latent.
    pub fn encode(&self, v: &EmbeddingVector) -> Result<EmbeddingVector> {
        let u = self.project(v.modality(), v.values())?;
        let n = math::norm(&u);
        if !(n > 0.0) || !n.is_finite() {
            return Err(if n == 0.0 { Error::ZeroVector } else { Error::NonFinite });
        }
        EmbeddingVector::new(v.id(), v.modality(), u.into_iter().map(|x| x / n).collect())
    }

    pub fn encode_batch(&self, raw: &RetrievalBatch) -> Result<RetrievalBatch> {
        raw.try_map(|v| self.encode(v))
    }
}

/// Gradients with respect to both weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub image: Matrix,
    pub caption: Matrix,
}

impl ParamGrad {
    pub fn get(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Image => &self.image,
            Modality::Caption => &self.caption,
        }
    }

    fn get_mut(&mut self, modality: Modality) -> &mut Matrix {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Caption => &mut self.caption,
        }
    }
}

struct Encoded {
    raw: Vec<f64>,
    emb: Vec<f64>,
    norm: f64,
    grad: Vec<f64>,
}

fn encode_side(enc: &EncoderPair, raw: &[EmbeddingVector]) -> Result<Vec<Encoded>> {
    raw.iter()
        .map(|v| {
            let u = enc.project(v.modality(), v.values())?;
            let norm = math::norm(&u);
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(if norm == 0.0 { Error::ZeroVector } else { Error::NonFinite });
            }
            let d = u.len();
            Ok(Encoded { raw: v.values().to_vec(), emb: u.into_iter().map(|x| x / norm).collect(), norm, grad: vec![0.0; d] })
        })
        .collect()
}

/// Scalar batch loss of `kind` under `enc`, and its exact gradient with
/// respect to both weight matrices.
pub fn full_batch_grad(
    raw: &RetrievalBatch,
    kind: LossKind,
    params: &LossParams,
    enc: &EncoderPair,
) -> Result<(f64, ParamGrad)> {
    let batch = enc.encode_batch(raw)?;
    let loss = batch_loss(kind, &batch, params)?;
    let mut images = encode_side(enc, raw.images())?;
    let mut captions = encode_side(enc, raw.captions())?;
    let c = kind.query_coefficient(&batch);

    for dir in Direction::BOTH {
        let (queries, cands) = match dir {
            Direction::I2T => (&mut images, &mut captions),
            Direction::T2I => (&mut captions, &mut images),
        };
        for (qi, s) in batch.score_sets(dir)?.iter().enumerate() {
            if s.num_negatives() == 0 && matches!(kind, LossKind::Triplet | LossKind::TripletSh) {
                continue;
            }
            let g = score_gradient(s, &query_terms(kind, s, params)?)?;
            // score sets and candidate slices are both ordered by id
            let q = &mut queries[qi];
            for (ci, &gc) in g.iter().enumerate() {
                if gc == 0.0 {
                    continue;
                }
                let cand = &mut cands[ci];
                for ((gq, gcv), (eq, ec)) in
                    q.grad.iter_mut().zip(cand.grad.iter_mut()).zip(q.emb.iter().zip(&cand.emb))
                {
                    *gq += c * gc * ec;
                    *gcv += c * gc * eq;
                }
            }
        }
    }

    let (d_out, d_in) = (enc.d_out(), enc.d_in());
    let mut grads = ParamGrad { image: Matrix::zeros(d_out, d_in), caption: Matrix::zeros(d_out, d_in) };
    for (side, modality) in [(&images, Modality::Image), (&captions, Modality::Caption)] {
        let m = grads.get_mut(modality);
        for e in side.iter() {
            // d e / d u = (I - e e^T) / |u|
            let proj = math::dot(&e.grad, &e.emb);
            let du: Vec<f64> = e.grad.iter().zip(&e.emb).map(|(g, x)| (g - x * proj) / e.norm).collect();
            m.add_outer(1.0, &du, &e.raw);
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub params: LossParams,
    pub epochs: usize,
    pub lr: f64,
    /// Epoch after which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay: f64,
    /// Pairs per batch for pairwise losses, images per batch for SmoothAP.
    pub batch_n: usize,
    pub d_out: usize,
    pub seed: u64,
    /// Multiply the epoch count (and decay epoch) by `k` for losses with
    /// grouped batches, so every image is visited as often as under
    /// pairwise sampling.
    pub scale_grouped_epochs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::TripletSh,
            params: LossParams::default(),
            epochs: 30,
            lr: 2e-4,
            lr_decay_epoch: Some(15),
            lr_decay: 0.1,
            batch_n: 128,
            d_out: 32,
            seed: 0,
            scale_grouped_epochs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be a finite value >= 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::InvalidConfig("lr_decay must be > 0".into()));
        }
        if self.batch_n == 0 || self.d_out == 0 {
            return Err(Error::InvalidConfig("batch_n and d_out must be >= 1".into()));
        }
        Ok(())
    }

    fn multiplier(&self, k: usize) -> usize {
        if self.scale_grouped_epochs && self.loss.uses_grouped_batches() {
            k
        } else {
            1
        }
    }

    /// Epochs actually run on a dataset with `k` captions per image.
    pub fn effective_epochs(&self, k: usize) -> usize {
        self.epochs * self.multiplier(k)
    }

    /// Learning rate in (1-based) `epoch`.
    pub fn lr_at(&self, epoch: usize, k: usize) -> f64 {
        match self.lr_decay_epoch {
            Some(e) if epoch > e * self.multiplier(k) => self.lr * self.lr_decay,
            _ => self.lr,
        }
    }

    pub fn layout(&self) -> BatchLayout {
        if self.loss.uses_grouped_batches() {
            BatchLayout::Grouped
        } else {
            BatchLayout::Pairwise
        }
    }
}

/// Best encoders seen so far by validation rsum. Epoch 0 is the
/// initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoders: EncoderPair,
    pub epoch: usize,
    pub val_rsum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub val_rsum: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub initial_val_rsum: f64,
    pub epochs: Vec<EpochLog>,
}

/// Encodes the full corpus of `split` and evaluates both directions.
pub fn evaluate_split(
    enc: &EncoderPair,
    dataset: &SynthDataset,
    split: Split,
) -> Result<(RetrievalMetrics, RetrievalMetrics)> {
    let corpus = enc.encode_batch(&dataset.corpus(split)?)?;
    Ok((metrics::evaluate(&corpus, Direction::I2T)?, metrics::evaluate(&corpus, Direction::T2I)?))
}

pub fn split_rsum(enc: &EncoderPair, dataset: &SynthDataset, split: Split) -> Result<f64> {
    let (i2t, t2i) = evaluate_split(enc, dataset, split)?;
    Ok(metrics::rsum(&i2t, &t2i))
}

/// One gradient step over a raw batch; returns the batch loss before the
/// update.
pub fn step(
    enc: &mut EncoderPair,
    raw: &RetrievalBatch,
    kind: LossKind,
    params: &LossParams,
    lr: f64,
) -> Result<f64> {
    let (loss, grad) = full_batch_grad(raw, kind, params, enc)?;
    for m in [Modality::Image, Modality::Caption] {
        enc.weights_mut(m).axpy(-lr, grad.get(m));
    }
    Ok(loss)
}

/// Trains from a seeded initialization, keeping the checkpoint with the
/// highest validation rsum (ties keep the earlier epoch).
pub fn train(dataset: &SynthDataset, config: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    let enc = EncoderPair::init(dataset.latent_dim(), config.d_out, derive_seed(config.seed, 0))?;
    train_from(dataset, config, enc)
}

/// As [`train`], starting from the given encoders.
pub fn train_from(
    dataset: &SynthDataset,
    config: &TrainConfig,
    mut enc: EncoderPair,
) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    if enc.d_in() != dataset.latent_dim() {
        return Err(Error::DimensionMismatch { left: enc.d_in(), right: dataset.latent_dim() });
    }
    let k = dataset.captions_per_image();
    let initial = split_rsum(&enc, dataset, Split::Val)?;
    let mut best = Checkpoint { encoders: enc.clone(), epoch: 0, val_rsum: initial };
    let mut log = TrainLog { initial_val_rsum: initial, epochs: Vec::new() };

    for epoch in 1..=config.effective_epochs(k) {
        let lr = config.lr_at(epoch, k);
        let batches = sample_batches(dataset, config.layout(), config.batch_n, derive_seed(config.seed, epoch as u64))?;
        let mut total = 0.0;
        for raw in &batches {
            let loss = step(&mut enc, raw, config.loss, &config.params, lr)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            total += loss;
        }
        if enc.image.data.iter().chain(&enc.caption.data).any(|x| !x.is_finite()) {
            return Err(Error::DivergedLoss { epoch });
        }
        let val_rsum = split_rsum(&enc, dataset, Split::Val)?;
        log.epochs.push(EpochLog { epoch, loss: total / batches.len().max(1) as f64, val_rsum, lr });
        if val_rsum > best.val_rsum {
            best = Checkpoint { encoders: enc.clone(), epoch, val_rsum };
        }
    }
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::test_support::*;
    use crate::gradcheck::{compare, finite_difference_grad_4};
    use crate::synth::{generate, SynthConfig};
    use approx::assert_abs_diff_eq;
    use std::vec;

    fn raw_pairwise() -> RetrievalBatch {
        pairwise(&[&[1.0, 0.2, -0.5], &[-0.3, 0.8, 0.1]], &[&[0.9, 0.1, -0.2], &[0.2, 1.1, 0.4]])
    }

    fn raw_grouped() -> RetrievalBatch {
        grouped(2, 2, |m, id| {
            let t = id as f64;
            match m {
                Modality::Image => vec![1.0 - t, 0.5 * t, 0.3],
                Modality::Caption => vec![0.8 - 0.4 * t, 0.1 + 0.2 * t, -0.2 + 0.1 * t],
            }
        })
    }

    fn param_fd(raw: &RetrievalBatch, kind: LossKind, p: &LossParams, enc: &EncoderPair, m: Modality) -> Vec<f64> {
        let f = |w: &[f64]| {
            let mut e = enc.clone();
            e.weights_mut(m).data_mut().copy_from_slice(w);
            batch_loss(kind, &e.encode_batch(raw).unwrap(), p).unwrap()
        };
        finite_difference_grad_4(f, enc.weights(m).data(), 1e-5).unwrap()
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let enc = EncoderPair::init(3, 2, 5).unwrap();
        let p = LossParams { alpha: 1.5, tau_smooth: 0.5, ..Default::default() };
        for kind in LossKind::ALL {
            let raw = if kind.uses_grouped_batches() { raw_grouped() } else { raw_pairwise() };
            let (_, g) = full_batch_grad(&raw, kind, &p, &enc).unwrap();
            for m in [Modality::Image, Modality::Caption] {
                let numeric = param_fd(&raw, kind, &p, &enc, m);
                let (rel, ..) = compare(g.get(m).data(), &numeric);
                assert!(rel < 1e-5, "{kind} {m}: {rel}");
            }
        }
    }

    #[test]
    fn satisfied_hinges_give_zero_gradient() {
        let enc = EncoderPair::new(
            Matrix::from_rows(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
            Matrix::from_rows(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let raw = pairwise(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]], &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        for kind in [LossKind::Triplet, LossKind::TripletSh] {
            let (loss, g) = full_batch_grad(&raw, kind, &LossParams::default(), &enc).unwrap();
            assert_eq!(loss, 0.0);
            assert_eq!(g.image.max_abs() + g.caption.max_abs(), 0.0);
        }
    }

    #[test]
    fn scaling_weights_scales_gradient_inversely() {
        let enc = EncoderPair::init(3, 2, 8).unwrap();
        let scaled = EncoderPair::new(enc.image.scaled(3.0), enc.caption.scaled(3.0)).unwrap();
        let p = LossParams::default();
        for kind in [LossKind::Triplet, LossKind::NtXent] {
            let (l1, g1) = full_batch_grad(&raw_pairwise(), kind, &p, &enc).unwrap();
            let (l2, g2) = full_batch_grad(&raw_pairwise(), kind, &p, &scaled).unwrap();
            assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
            for (a, b) in g1.image.data().iter().zip(g2.image.data()) {
                assert_abs_diff_eq!(*a, 3.0 * b, epsilon = 1e-12);
            }
        }
    }

    fn tiny(sigma: f64, nuisance: usize) -> SynthDataset {
        generate(&SynthConfig {
            num_tuples: 60,
            captions_per_image: 2,
            core_dim: 4,
            nuisance_dim: nuisance,
            noise_scale: sigma,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick(loss: LossKind) -> TrainConfig {
        TrainConfig { loss, epochs: 20, lr: 0.05, lr_decay_epoch: None, batch_n: 16, d_out: 4, seed: 1, ..Default::default() }
    }

    #[test]
    fn zero_lr_keeps_initialization() {
        let ds = tiny(0.5, 4);
        let cfg = TrainConfig { lr: 0.0, epochs: 2, ..quick(LossKind::TripletSh) };
        let (ck, log) = train(&ds, &cfg).unwrap();
        assert_eq!(ck.epoch, 0);
        assert_eq!(ck.val_rsum, log.initial_val_rsum);
        assert_eq!(ck.encoders, EncoderPair::init(ds.latent_dim(), 4, derive_seed(1, 0)).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny(0.5, 4);
        let cfg = TrainConfig { epochs: 3, ..quick(LossKind::NtXent) };
        assert_eq!(train(&ds, &cfg).unwrap(), train(&ds, &cfg).unwrap());
    }

    #[test]
    fn separable_data_is_solved_by_every_loss() {
        let ds = tiny(0.0, 0);
        for loss in LossKind::ALL {
            let lr = match loss {
                LossKind::Triplet | LossKind::TripletSh => 0.05,
                _ => 0.5,
            };
            let (ck, _) = train(&ds, &TrainConfig { lr, ..quick(loss) }).unwrap();
            let (i2t, t2i) = evaluate_split(&ck.encoders, &ds, Split::Val).unwrap();
            assert_eq!((i2t.recall(1), t2i.recall(1)), (Some(1.0), Some(1.0)), "{loss}");
            assert!(ck.val_rsum >= 0.0);
        }
    }

    #[test]
    fn small_lr_loss_does_not_increase_on_separable_data() {
        let ds = tiny(0.0, 0);
        let cfg = TrainConfig { lr: 1e-4, epochs: 6, ..quick(LossKind::Triplet) };
        let (_, log) = train(&ds, &cfg).unwrap();
        for w in log.epochs.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-12, "{:?}", log.epochs);
        }
    }

    #[test]
    fn checkpoint_never_below_initialization() {
        let ds = tiny(0.5, 4);
        for loss in LossKind::ALL {
            let (ck, log) = train(&ds, &TrainConfig { epochs: 2, ..quick(loss) }).unwrap();
            assert!(ck.val_rsum >= log.initial_val_rsum);
            assert!(log.epochs.iter().all(|e| e.val_rsum <= ck.val_rsum));
        }
    }

    #[test]
    fn grouped_losses_run_k_times_more_epochs() {
        let ds = tiny(0.5, 4);
        let cfg = TrainConfig { epochs: 2, lr_decay_epoch: Some(1), ..quick(LossKind::SmoothAp) };
        let (_, log) = train(&ds, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 4);
        let lrs: Vec<f64> = log.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs[..2], [0.05, 0.05]);
        assert_eq!(lrs[2..], [0.05 * 0.1, 0.05 * 0.1]);
        // image visits per effective epoch equal caption visits per pairwise epoch
        let pair = sample_batches(&ds, BatchLayout::Pairwise, 16, 0).unwrap();
        let grp = sample_batches(&ds, BatchLayout::Grouped, 16, 0).unwrap();
        let captions: usize = pair.iter().map(|b| b.captions().len()).sum();
        let images: usize = grp.iter().map(|b| b.images().len()).sum();
        assert_eq!(captions, images * ds.captions_per_image());
    }

    #[test]
    fn diverging_runs_are_reported() {
        let ds = tiny(0.5, 4);
        let cfg = TrainConfig { lr: f64::MAX, epochs: 3, ..quick(LossKind::Triplet) };
        assert!(matches!(train(&ds, &cfg), Err(Error::DivergedLoss { .. } | Error::NonFinite)));
    }
}
