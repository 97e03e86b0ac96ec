//! Contrastive losses for image-caption retrieval, their closed-form query
//! gradients, gradient-contribution counting (COCOS), and exact retrieval
//! metrics.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is pure
//! computation over immutable inputs; file formats, configuration and the
//! experiment CLI live in the `cocos-lab` companion crate.
//!
//! Module map:
//!
//! | module        | contents                                                      |
//! |---------------|---------------------------------------------------------------|
//! | [`embedding`] | embeddings, retrieval batches, score sets                     |
//! | [`losses`]    | Triplet, Triplet SH, NT-Xent, SmoothAP values and gradients   |
//! | [`metrics`]   | ranks, exact AP, Recall@k, AP@k, corpus evaluation            |
//! | [`cocos`]     | counts and weights of contributing candidates                 |
//! | [`gradcheck`] | central finite-difference oracle                              |
//! | [`synth`]     | synthetic core/nuisance latent dataset generator               |
//! | [`trainer`]   | linear dual encoder trained by plain gradient descent         |
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cocos;
pub mod embedding;
mod error;
pub mod gradcheck;
pub mod losses;
mod math;
pub mod metrics;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use embedding::{
    cosine_similarity, normalize, score_set, Direction, EmbeddingVector, Layout, Modality,
    RetrievalBatch, ScoreSet,
};
pub use error::{Error, Result};
pub use losses::{GradientReport, GradientTerm, LossKind, LossParams};
pub use metrics::RetrievalMetrics;
