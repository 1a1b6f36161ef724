//! Shared error type for the numeric pipeline.

use thiserror::Error;

/// Failures raised while moving tensors through the model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("spatial dims ({h}, {w}) not divisible by shuffle factor {r}")]
    IndivisibleFactor { h: usize, w: usize, r: usize },
    #[error("channel count {channels} not divisible by {divisor}")]
    IndivisibleChannels { channels: usize, divisor: usize },
    #[error("modality mismatch: {0}")]
    ModalityMismatch(String),
    #[error("region mask selects no cells at grid resolution {h}x{w}")]
    EmptyRegion { h: usize, w: usize },
    #[error("sample declares {masks} masks but text references {placeholders} regions")]
    RegionCountMismatch { masks: usize, placeholders: usize },
    #[error("text contains <image> but no image tokens were provided")]
    MissingImageTokens,
    #[error("conversation roles out of order: {0}")]
    RoleOrder(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("loss mask selects no positions")]
    EmptyLossMask,
}
