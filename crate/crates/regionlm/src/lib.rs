//! Region-conditioned vision-language modeling at desk scale.
//!
//! The pipeline: a frozen patch encoder turns an RGB image and its depth map
//! into feature grids, per-modality connectors compress those grids into
//! language-model tokens via pixel shuffling, refiners upsample the token
//! grids back toward mask resolution, and mask pooling produces one embedding
//! per annotated region. Region placeholders in the conversation text are
//! replaced by those embeddings before the sequence reaches a small causal
//! decoder. Training runs a three-stage curriculum; evaluation normalizes
//! free-form answers into directional, count, distance, and choice verdicts.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod connector;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod lm;
pub mod model;
pub mod refiner;
pub mod seq;
pub mod train;

mod error;

pub use error::ModelError;
