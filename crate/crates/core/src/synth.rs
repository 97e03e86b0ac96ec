//! Synthetic image-caption latents with shared core features and
//! per-caption nuisance.
//!
//! Every tuple draws a core vector `z0 ~ N(0, I)` shared verbatim by the
//! image and all of its captions. The image adds its own nuisance block,
//! each caption an independent one, both `sigma * N(0, I)`. Optionally an
//! identifier block is appended to the image and every caption of a tuple:
//! `t` symbols drawn from a pool of `id_dim`, encoded as symbol counts. It
//! plays the role of an easy shortcut feature that makes matching possible
//! without looking at the core block.
//!
//! Latents are raw, not unit-norm; encoders normalize their outputs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedding::{EmbeddingVector, Layout, Modality, RetrievalBatch};
use crate::error::{Error, Result};

/// Identifier-injection parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentifierInjection {
    /// Symbols drawn per tuple (with replacement).
    pub count: usize,
    /// Size of the symbol pool, i.e. width of the identifier block.
    pub id_dim: usize,
    /// Value added per occurrence of a symbol.
    pub scale: f64,
}

impl Default for IdentifierInjection {
    fn default() -> Self {
        Self { count: 3, id_dim: 32, scale: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_tuples: usize,
    pub captions_per_image: usize,
    pub core_dim: usize,
    pub nuisance_dim: usize,
    pub noise_scale: f64,
    pub injection: Option<IdentifierInjection>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_tuples: 2000,
            captions_per_image: 5,
            core_dim: 8,
            nuisance_dim: 24,
            noise_scale: 0.5,
            injection: None,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn identifier_dim(&self) -> usize {
        self.injection.map_or(0, |i| i.id_dim)
    }

    /// Width of a latent record: core + nuisance + identifier block.
    pub fn latent_dim(&self) -> usize {
        self.core_dim + self.nuisance_dim + self.identifier_dim()
    }

    /// `(train, val, test)` tuple counts.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.num_tuples as f64;
        let val = libm::round(n * self.val_fraction) as usize;
        let test = libm::round(n * self.test_fraction) as usize;
        (self.num_tuples.saturating_sub(val + test), val, test)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.core_dim == 0 {
            return bad("core_dim must be >= 1");
        }
        if self.captions_per_image == 0 {
            return bad("captions_per_image must be >= 1");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be >= 0");
        }
        for f in [self.val_fraction, self.test_fraction] {
            if !(0.0..1.0).contains(&f) {
                return bad("split fractions must lie in [0, 1)");
            }
        }
        let (train, val, test) = self.split_sizes();
        if train == 0 || val == 0 || test == 0 || train + val + test != self.num_tuples {
            return Err(Error::InvalidConfig(format!(
                "{} tuples give an empty split ({train}/{val}/{test})",
                self.num_tuples
            )));
        }
        if let Some(inj) = self.injection {
            if inj.count == 0 || inj.id_dim == 0 {
                return bad("identifier count and id_dim must be >= 1");
            }
            if !(inj.scale > 0.0 && inj.scale.is_finite()) {
                return bad("identifier scale must be > 0");
            }
        }
        Ok(())
    }
}

/// One image latent with its captions' latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuple {
    pub index: u64,
    pub image: Vec<f64>,
    pub captions: Vec<Vec<f64>>,
}

impl Tuple {
    pub fn caption_id(&self, j: usize) -> u64 {
        self.index * self.captions.len() as u64 + j as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub train: Vec<Tuple>,
    pub val: Vec<Tuple>,
    pub test: Vec<Tuple>,
}

impl SynthDataset {
    /// Assembles a dataset from already materialized splits (e.g. read back
    /// from disk), checking shapes against `config`.
    pub fn from_parts(
        config: SynthConfig,
        train: Vec<Tuple>,
        val: Vec<Tuple>,
        test: Vec<Tuple>,
    ) -> Result<Self> {
        let d = config.latent_dim();
        let k = config.captions_per_image;
        for t in train.iter().chain(&val).chain(&test) {
            if t.image.len() != d || t.captions.len() != k || t.captions.iter().any(|c| c.len() != d) {
                return Err(Error::InvalidConfig(format!("tuple {} does not match the manifest", t.index)));
            }
        }
        if train.is_empty() || val.is_empty() || test.is_empty() {
            return Err(Error::InvalidConfig("every split needs at least one tuple".into()));
        }
        Ok(Self { config, train, val, test })
    }

    pub fn split(&self, split: Split) -> &[Tuple] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn captions_per_image(&self) -> usize {
        self.config.captions_per_image
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    /// Full evaluation corpus of a split: every image with all of its
    /// captions, image id = tuple index, caption id = `index * k + j`.
    pub fn corpus(&self, split: Split) -> Result<RetrievalBatch> {
        corpus_of(self.split(split), self.captions_per_image())
    }
}

/// Grouped corpus over `tuples`.
pub fn corpus_of(tuples: &[Tuple], k: usize) -> Result<RetrievalBatch> {
    let mut images = Vec::with_capacity(tuples.len());
    let mut captions = Vec::with_capacity(tuples.len() * k);
    let mut map = BTreeMap::new();
    for t in tuples {
        images.push(EmbeddingVector::new(t.index, Modality::Image, t.image.clone())?);
        let mut ids = Vec::with_capacity(k);
        for (j, c) in t.captions.iter().enumerate() {
            let id = t.caption_id(j);
            captions.push(EmbeddingVector::new(id, Modality::Caption, c.clone())?);
            ids.push(id);
        }
        map.insert(t.index, ids);
    }
    RetrievalBatch::new(images, captions, map, Layout::Grouped { k })
}

/// Mixes `salt` into `base` (splitmix64 finalizer) to derive independent
/// seeds for sub-streams.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64, out: &mut Vec<f64>) {
    for _ in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        out.push(scale * x);
    }
}

/// Generates the dataset described by `config`. Deterministic in the seed.
///
/// Core and nuisance values come from one random stream and identifiers
/// from another, so switching injection on or off leaves the first
/// `core_dim + nuisance_dim` coordinates untouched.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut id_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let (d0, dn, k) = (config.core_dim, config.nuisance_dim, config.captions_per_image);
    let sigma = config.noise_scale;

    let mut tuples = Vec::with_capacity(config.num_tuples);
    for index in 0..config.num_tuples as u64 {
        let mut core = Vec::with_capacity(d0);
        normals(&mut rng, d0, 1.0, &mut core);
        let ident = config.injection.map(|inj| {
            let mut block = vec![0.0; inj.id_dim];
            for _ in 0..inj.count {
                block[id_rng.random_range(0..inj.id_dim)] += inj.scale;
            }
            block
        });
        let record = |rng: &mut ChaCha8Rng| {
            let mut v = core.clone();
            normals(rng, dn, sigma, &mut v);
            if let Some(b) = &ident {
                v.extend_from_slice(b);
            }
            v
        };
        let image = record(&mut rng);
        let captions = (0..k).map(|_| record(&mut rng)).collect();
        tuples.push(Tuple { index, image, captions });
    }
    let (train_n, val_n, _) = config.split_sizes();
    let test = tuples.split_off(train_n + val_n);
    let val = tuples.split_off(train_n);
    Ok(SynthDataset { config: config.clone(), train: tuples, val, test })
}

/// Zeroes the identifier block of every test record; other splits are left
/// as they are. Idempotent.
pub fn strip_identifiers(dataset: &SynthDataset) -> Result<SynthDataset> {
    let inj = dataset.config.injection.ok_or(Error::NoIdentifiers)?;
    let start = dataset.latent_dim() - inj.id_dim;
    let mut out = dataset.clone();
    for t in &mut out.test {
        t.image[start..].fill(0.0);
        for c in &mut t.captions {
            c[start..].fill(0.0);
        }
    }
    Ok(out)
}

/// Which batches one training epoch produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchLayout {
    /// Iterate over captions: each caption once, paired with its image.
    Pairwise,
    /// Iterate over images: each image once, with all of its captions.
    Grouped,
}

/// Shuffled batches covering `tuples` once.
///
/// Pairwise batches hold `batch_n` image-caption pairs. Their images get slot
/// ids `0..n` since one image may occur in several pairs; an image sampled
/// twice in the same batch is a negative for its other caption. Grouped
/// batches hold `batch_n` images with ids equal to tuple indices. The last
/// batch may be partial.
pub fn sample_split_batches(
    tuples: &[Tuple],
    layout: BatchLayout,
    batch_n: usize,
    seed: u64,
) -> Result<Vec<RetrievalBatch>> {
    if batch_n == 0 {
        return Err(Error::InvalidLayout("batch size must be >= 1".into()));
    }
    let Some(k) = tuples.first().map(|t| t.captions.len()) else {
        return Ok(Vec::new());
    };
    if k == 0 || tuples.iter().any(|t| t.captions.len() != k) {
        return Err(Error::InvalidLayout("tuples must all have the same k >= 1 captions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    match layout {
        BatchLayout::Pairwise => {
            let mut pairs: Vec<(usize, usize)> =
                (0..tuples.len()).flat_map(|t| (0..k).map(move |j| (t, j))).collect();
            pairs.shuffle(&mut rng);
            for chunk in pairs.chunks(batch_n) {
                let mut images = Vec::with_capacity(chunk.len());
                let mut captions = Vec::with_capacity(chunk.len());
                let mut map = BTreeMap::new();
                for (slot, &(t, j)) in chunk.iter().enumerate() {
                    let tuple = &tuples[t];
                    let cid = tuple.caption_id(j);
                    images.push(EmbeddingVector::new(slot as u64, Modality::Image, tuple.image.clone())?);
                    captions.push(EmbeddingVector::new(cid, Modality::Caption, tuple.captions[j].clone())?);
                    map.insert(slot as u64, vec![cid]);
                }
                batches.push(RetrievalBatch::new(images, captions, map, Layout::Pairwise)?);
            }
        }
        BatchLayout::Grouped => {
            let mut order: Vec<usize> = (0..tuples.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch_n) {
                let picked: Vec<Tuple> = chunk.iter().map(|&i| tuples[i].clone()).collect();
                batches.push(corpus_of(&picked, k)?);
            }
        }
    }
    Ok(batches)
}

/// One epoch of training batches over the train split.
pub fn sample_batches(
    dataset: &SynthDataset,
    layout: BatchLayout,
    batch_n: usize,
    seed: u64,
) -> Result<Vec<RetrievalBatch>> {
    sample_split_batches(&dataset.train, layout, batch_n, seed)
}
