//! Embeddings, retrieval batches and per-query score sets.
//!
//! Similarity between a query and a candidate is the plain dot product. Once
//! both sides are unit-norm this is the cosine similarity; query gradients in
//! [`crate::losses`] treat the query as a free (unnormalized) vector scored
//! against fixed, normalized candidates.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Caption,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Caption => "caption",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "caption" => Ok(Modality::Caption),
            other => Err(Error::InvalidParams(format!("unknown modality `{other}`"))),
        }
    }
}

/// Retrieval sub-task: image query against captions, or caption query
/// against images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// Image-to-text.
    I2T,
    /// Text-to-image.
    T2I,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::I2T, Direction::T2I];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::I2T => "i2t",
            Direction::T2I => "t2i",
        }
    }

    pub fn query_modality(self) -> Modality {
        match self {
            Direction::I2T => Modality::Image,
            Direction::T2I => Modality::Caption,
        }
    }

    pub fn candidate_modality(self) -> Modality {
        match self {
            Direction::I2T => Modality::Caption,
            Direction::T2I => Modality::Image,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Direction::I2T),
            "t2i" => Ok(Direction::T2I),
            other => Err(Error::InvalidParams(format!("unknown direction `{other}`"))),
        }
    }
}

/// A point in the shared latent space, tagged with its modality and an
/// opaque id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    id: u64,
    modality: Modality,
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(id: u64, modality: Modality, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { id, modality, values })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        math::norm(&self.values)
    }

    /// Same id and modality, new coordinates.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.id, self.modality, values)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let values = v.values.iter().map(|x| x / norm).collect();
    Ok(EmbeddingVector { id: v.id, modality: v.modality, values })
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((math::dot(&a.values, &b.values) / (na * nb)).clamp(-1.0, 1.0))
}

/// How a batch was assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `n` image-caption pairs; every image has exactly one positive caption
    /// and `|B| = 2n`.
    Pairwise,
    /// `n` images with all of their `k` captions; `|B| = n(k + 1)`.
    Grouped { k: usize },
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::Pairwise => "pairwise",
            Layout::Grouped { .. } => "grouped",
        }
    }
}

/// Images and captions of one batch (or one evaluation corpus) together with
/// the image → positive captions map.
///
/// Images and captions are kept sorted by ascending id. Ids are unique within
/// a modality.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalBatch {
    images: Vec<EmbeddingVector>,
    captions: Vec<EmbeddingVector>,
    positives: BTreeMap<u64, Vec<u64>>,
    owner: BTreeMap<u64, u64>,
    layout: Layout,
}

impl RetrievalBatch {
    pub fn new(
        mut images: Vec<EmbeddingVector>,
        mut captions: Vec<EmbeddingVector>,
        positive_map: BTreeMap<u64, Vec<u64>>,
        layout: Layout,
    ) -> Result<Self> {
        let invalid = |msg: alloc::string::String| Err(Error::InvalidBatch(msg));
        images.sort_by_key(|e| e.id);
        captions.sort_by_key(|e| e.id);
        if images.windows(2).any(|w| w[0].id == w[1].id) {
            return invalid("duplicate image id".into());
        }
        if captions.windows(2).any(|w| w[0].id == w[1].id) {
            return invalid("duplicate caption id".into());
        }
        if images.iter().any(|e| e.modality != Modality::Image)
            || captions.iter().any(|e| e.modality != Modality::Caption)
        {
            return invalid("modality does not match its list".into());
        }
        if let Some(first) = images.first().or(captions.first()) {
            let d = first.dim();
            if let Some(bad) = images.iter().chain(&captions).find(|e| e.dim() != d) {
                return Err(Error::DimensionMismatch { left: d, right: bad.dim() });
            }
        }
        if positive_map.len() != images.len() {
            return invalid(format!(
                "positive map covers {} images, batch has {}",
                positive_map.len(),
                images.len()
            ));
        }
        let mut owner = BTreeMap::new();
        for (&image, caps) in &positive_map {
            if images.binary_search_by_key(&image, |e| e.id).is_err() {
                return invalid(format!("positive map names unknown image {image}"));
            }
            let expected = match layout {
                Layout::Pairwise => 1,
                Layout::Grouped { k } => k,
            };
            if caps.len() != expected {
                return invalid(format!(
                    "{} layout requires {expected} positives per image, image {image} has {}",
                    layout.name(),
                    caps.len()
                ));
            }
            for &c in caps {
                if captions.binary_search_by_key(&c, |e| e.id).is_err() {
                    return invalid(format!("positive map names unknown caption {c}"));
                }
                if owner.insert(c, image).is_some() {
                    return invalid(format!("caption {c} is positive for more than one image"));
                }
            }
        }
        if owner.len() != captions.len() {
            return invalid("every caption must belong to exactly one image".into());
        }
        Ok(Self { images, captions, positives: positive_map, owner, layout })
    }

    pub fn images(&self) -> &[EmbeddingVector] {
        &self.images
    }

    pub fn captions(&self) -> &[EmbeddingVector] {
        &self.captions
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn positive_map(&self) -> &BTreeMap<u64, Vec<u64>> {
        &self.positives
    }

    /// Embedding dimension, `None` for an empty batch.
    pub fn dim(&self) -> Option<usize> {
        self.images.first().or(self.captions.first()).map(|e| e.dim())
    }

    /// Number of embeddings, `|B|`.
    pub fn size(&self) -> usize {
        self.images.len() + self.captions.len()
    }

    pub fn positives_of(&self, image_id: u64) -> Option<&[u64]> {
        self.positives.get(&image_id).map(|v| v.as_slice())
    }

    pub fn image_of(&self, caption_id: u64) -> Option<u64> {
        self.owner.get(&caption_id).copied()
    }

    pub fn image(&self, id: u64) -> Option<&EmbeddingVector> {
        self.images.binary_search_by_key(&id, |e| e.id).ok().map(|i| &self.images[i])
    }

    pub fn caption(&self, id: u64) -> Option<&EmbeddingVector> {
        self.captions.binary_search_by_key(&id, |e| e.id).ok().map(|i| &self.captions[i])
    }

    pub fn queries(&self, direction: Direction) -> &[EmbeddingVector] {
        match direction {
            Direction::I2T => &self.images,
            Direction::T2I => &self.captions,
        }
    }

    pub fn candidates(&self, direction: Direction) -> &[EmbeddingVector] {
        match direction {
            Direction::I2T => &self.captions,
            Direction::T2I => &self.images,
        }
    }

    /// Looks up a candidate of the modality opposite to `direction`'s query.
    pub fn candidate(&self, direction: Direction, id: u64) -> Option<&EmbeddingVector> {
        match direction {
            Direction::I2T => self.caption(id),
            Direction::T2I => self.image(id),
        }
    }

    /// Applies `f` to every embedding, keeping ids, modality and structure.
    pub fn try_map<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&EmbeddingVector) -> Result<EmbeddingVector>,
    {
        let images = self.images.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        let captions = self.captions.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Self::new(images, captions, self.positives.clone(), self.layout)
    }

    /// Unit-normalizes every embedding.
    pub fn normalized(&self) -> Result<Self> {
        self.try_map(normalize)
    }

    /// Score sets for every query of `direction`, in ascending query id order.
    pub fn score_sets(&self, direction: Direction) -> Result<Vec<ScoreSet>> {
        self.queries(direction).iter().map(|q| score_set(q, self, direction)).collect()
    }
}

/// Similarity scores of one query against every candidate of the opposite
/// modality, split into positives and negatives.
///
/// Candidates are ordered by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    query_id: u64,
    direction: Direction,
    scores: Vec<(u64, f64)>,
    positive: Vec<bool>,
}

impl ScoreSet {
    pub fn new<I>(
        query_id: u64,
        direction: Direction,
        mut scores: Vec<(u64, f64)>,
        positive_ids: I,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = u64>,
    {
        scores.sort_by_key(|&(id, _)| id);
        if scores.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidScoreSet("duplicate candidate id".into()));
        }
        if scores.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::NonFinite);
        }
        let positive_ids: BTreeSet<u64> = positive_ids.into_iter().collect();
        let mut positive = alloc::vec![false; scores.len()];
        for id in positive_ids {
            match scores.binary_search_by_key(&id, |&(c, _)| c) {
                Ok(i) => positive[i] = true,
                Err(_) => return Err(Error::CandidateNotFound(id)),
            }
        }
        Ok(Self { query_id, direction, scores, positive })
    }

    pub fn query_id(&self) -> u64 {
        self.query_id
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// `(candidate id, score)` pairs by ascending candidate id.
    pub fn scores(&self) -> &[(u64, f64)] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn id(&self, index: usize) -> u64 {
        self.scores[index].0
    }

    pub fn score(&self, index: usize) -> f64 {
        self.scores[index].1
    }

    pub fn is_positive(&self, index: usize) -> bool {
        self.positive[index]
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.scores.binary_search_by_key(&id, |&(c, _)| c).ok()
    }

    pub fn num_positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn num_negatives(&self) -> usize {
        self.len() - self.num_positives()
    }

    /// Indices of positive candidates.
    pub fn positive_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.positive[i])
    }

    /// Indices of negative candidates.
    pub fn negative_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.positive[i])
    }

    pub fn positive_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.positive_indices().map(|i| self.scores[i].0)
    }

    /// Same candidates and positives with replaced scores (same order as
    /// [`ScoreSet::scores`]).
    pub fn with_scores(&self, scores: &[f64]) -> Result<Self> {
        if scores.len() != self.len() {
            return Err(Error::DimensionMismatch { left: self.len(), right: scores.len() });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite);
        }
        let mut out = self.clone();
        for (slot, &s) in out.scores.iter_mut().zip(scores) {
            slot.1 = s;
        }
        Ok(out)
    }
}

/// Scores `query` against every opposite-modality candidate of `batch`.
///
/// The query is matched to the batch by id and modality only, so a perturbed
/// copy of a batch member can be scored against the batch.
pub fn score_set(
    query: &EmbeddingVector,
    batch: &RetrievalBatch,
    direction: Direction,
) -> Result<ScoreSet> {
    if query.modality != direction.query_modality() {
        return Err(Error::QueryNotInBatch(query.id));
    }
    let positives: Vec<u64> = match direction {
        Direction::I2T => batch
            .positives_of(query.id)
            .ok_or(Error::QueryNotInBatch(query.id))?
            .to_vec(),
        Direction::T2I => {
            alloc::vec![batch.image_of(query.id).ok_or(Error::QueryNotInBatch(query.id))?]
        }
    };
    let candidates = batch.candidates(direction);
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.dim() != query.dim() {
            return Err(Error::DimensionMismatch { left: query.dim(), right: c.dim() });
        }
        scores.push((c.id, math::dot(&query.values, &c.values)));
    }
    ScoreSet::new(query.id, direction, scores, positives)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn emb(id: u64, modality: Modality, values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(id, modality, values.to_vec()).unwrap()
    }

    /// Pairwise batch: image `i` is paired with caption `100 + i`.
    pub fn pairwise(images: &[&[f64]], captions: &[&[f64]]) -> RetrievalBatch {
        let imgs = images.iter().enumerate().map(|(i, v)| emb(i as u64, Modality::Image, v));
        let caps = captions
            .iter()
            .enumerate()
            .map(|(i, v)| emb(100 + i as u64, Modality::Caption, v));
        let map = (0..images.len() as u64).map(|i| (i, alloc::vec![100 + i])).collect();
        RetrievalBatch::new(imgs.collect(), caps.collect(), map, Layout::Pairwise).unwrap()
    }

    /// Grouped batch with `n` images and `k` captions each, coordinates taken
    /// from `f(modality, id)`. Caption ids are `image * k + j`.
    pub fn grouped<F>(n: usize, k: usize, mut f: F) -> RetrievalBatch
    where
        F: FnMut(Modality, u64) -> Vec<f64>,
    {
        let mut imgs = Vec::new();
        let mut caps = Vec::new();
        let mut map = BTreeMap::new();
        for i in 0..n as u64 {
            imgs.push(EmbeddingVector::new(i, Modality::Image, f(Modality::Image, i)).unwrap());
            let ids: Vec<u64> = (0..k as u64).map(|j| i * k as u64 + j).collect();
            for &c in &ids {
                caps.push(EmbeddingVector::new(c, Modality::Caption, f(Modality::Caption, c)).unwrap());
            }
            map.insert(i, ids);
        }
        RetrievalBatch::new(imgs, caps, map, Layout::Grouped { k }).unwrap()
    }
}
