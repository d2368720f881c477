//! Image-to-entities dataset construction and entity-supervised image
//! representation learning at desk scale.
//!
//! The pipeline runs in four stages over precomputed feature vectors:
//!
//! 1. [`curator::filter_pairs`] drops unsafe, small, duplicate, and
//!    low-similarity image-text pairs.
//! 2. [`linker`] finds entity mentions in the surviving texts and
//!    disambiguates them against Poincaré entity embeddings
//!    ([`hyperembed`]).
//! 3. [`curator::score_entities`] keeps entities whose enriched text
//!    embedding is close to the image.
//! 4. [`curator::build_i2e`] removes rare entities and reports the
//!    images-per-entity histogram.
//!
//! [`trainer`] then learns image (and text) encoders with a margin softmax
//! over sampled classes, a symmetric contrastive loss, or both, and [`eval`]
//! scores the learned embeddings.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curator;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hyperembed;
pub mod kb;
pub mod linker;
pub mod store;
pub mod text;
pub mod trainer;
pub mod vector;

pub use error::{Error, Result};
