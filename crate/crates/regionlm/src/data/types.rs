//! Core record types shared by the loader, generator, and model pipeline.

use std::collections::BTreeSet;
use std::path::PathBuf;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::rle;

/// Placeholder in user text marking where image tokens are inserted.
pub const IMAGE_PLACEHOLDER: &str = "<image>";
/// Placeholder in user text marking a region reference. The k-th occurrence
/// across user turns binds to `masks[k]`.
pub const MASK_PLACEHOLDER: &str = "<mask>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("sample {sample_id}: {reason}")]
    Invalid { sample_id: String, reason: String },
    #[error("sample {sample_id}: {masks} masks but {placeholders} {MASK_PLACEHOLDER} placeholders")]
    MaskCountMismatch {
        sample_id: String,
        masks: usize,
        placeholders: usize,
    },
    #[error("sample {sample_id}: region masks present but no depth input")]
    MissingDepth { sample_id: String },
    #[error("run-length payload covers {covered} cells, mask has {expected}")]
    RleLength { covered: usize, expected: usize },
    #[error("mask dimensions {h}x{w} overflow")]
    MaskTooLarge { h: usize, w: usize },
    #[error("unsupported category: {0}")]
    UnsupportedCategory(String),
    #[error("image file {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Question category carried by synthetic records and used for metric buckets.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    LeftRight,
    Count,
    Distance,
    MultiChoice,
}

pub const ALL_CATEGORIES: [QuestionType; 4] = [
    QuestionType::LeftRight,
    QuestionType::Count,
    QuestionType::Distance,
    QuestionType::MultiChoice,
];

impl QuestionType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::LeftRight => "left_right",
            QuestionType::Count => "count",
            QuestionType::Distance => "distance",
            QuestionType::MultiChoice => "multi_choice",
        }
    }
}

/// Parses a comma-separated category list; `all` selects every category.
pub fn parse_categories(arg: &str) -> Result<BTreeSet<QuestionType>, DataError> {
    let mut out = BTreeSet::new();
    for part in arg.split(',') {
        let part = part.trim();
        match part {
            "" => continue,
            "all" => {
                out.extend(ALL_CATEGORIES);
            }
            "left_right" => {
                out.insert(QuestionType::LeftRight);
            }
            "count" => {
                out.insert(QuestionType::Count);
            }
            "distance" => {
                out.insert(QuestionType::Distance);
            }
            "multi_choice" => {
                out.insert(QuestionType::MultiChoice);
            }
            other => return Err(DataError::UnsupportedCategory(other.to_string())),
        }
    }
    if out.is_empty() {
        return Err(DataError::InvalidArgument(
            "no categories selected".to_string(),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Binary region mask at its own resolution, which may differ from the image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    pub h: usize,
    pub w: usize,
    #[serde(flatten)]
    pub payload: MaskPayload,
}

/// Row-major mask payload. Run-length counts alternate zero-run, one-run,
/// starting with the zero count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskPayload {
    Rle { counts: Vec<usize> },
    Bitmap { bitmap: Vec<Vec<u8>> },
}

impl RegionMask {
    /// Expands the payload to a dense `h x w` grid of 0/1 cells.
    pub fn decode(&self) -> Result<Array2<u8>, DataError> {
        let cells = self
            .h
            .checked_mul(self.w)
            .ok_or(DataError::MaskTooLarge { h: self.h, w: self.w })?;
        match &self.payload {
            MaskPayload::Rle { counts } => rle::decode_rle(counts, self.h, self.w),
            MaskPayload::Bitmap { bitmap } => {
                if bitmap.len() != self.h {
                    return Err(DataError::RleLength {
                        covered: bitmap.len().saturating_mul(self.w),
                        expected: cells,
                    });
                }
                let mut out = Array2::zeros((self.h, self.w));
                for (y, row) in bitmap.iter().enumerate() {
                    if row.len() != self.w {
                        return Err(DataError::RleLength {
                            covered: row.len(),
                            expected: self.w,
                        });
                    }
                    for (x, &v) in row.iter().enumerate() {
                        if v > 1 {
                            return Err(DataError::InvalidArgument(format!(
                                "bitmap cell ({y}, {x}) is {v}, expected 0 or 1"
                            )));
                        }
                        out[(y, x)] = v;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Builds a mask with canonical run-length payload from a dense grid.
    pub fn from_dense(grid: &Array2<u8>) -> Self {
        let (h, w) = grid.dim();
        RegionMask {
            h,
            w,
            payload: MaskPayload::Rle {
                counts: rle::encode_rle(&grid.view()),
            },
        }
    }
}

/// One conversation about one image, with optional depth and region masks.
#[derive(Debug, Clone)]
pub struct ConversationSample {
    pub sample_id: String,
    /// RGB image, `(h, w, 3)`, values in `[0, 1]`.
    pub image: Array3<f64>,
    /// Metric depth in meters, `(h, w)`. Required whenever masks are present.
    pub depth: Option<Array2<f64>>,
    pub masks: Vec<RegionMask>,
    pub turns: Vec<Turn>,
    pub category: Option<QuestionType>,
}

fn count_occurrences(text: &str, needle: &str) -> usize {
    text.match_indices(needle).count()
}

impl ConversationSample {
    /// Total `<mask>` placeholders across user turns, in binding order.
    pub fn mask_placeholder_count(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.role == Role::User)
            .map(|t| count_occurrences(&t.text, MASK_PLACEHOLDER))
            .sum()
    }

    pub fn has_image_placeholder(&self) -> bool {
        self.turns
            .iter()
            .any(|t| t.role == Role::User && t.text.contains(IMAGE_PLACEHOLDER))
    }

    /// Checks every structural invariant a well-formed sample must satisfy.
    pub fn validate(&self) -> Result<(), DataError> {
        let id = &self.sample_id;
        let invalid = |reason: String| DataError::Invalid {
            sample_id: id.clone(),
            reason,
        };
        if id.is_empty() {
            return Err(DataError::Invalid {
                sample_id: "<empty>".to_string(),
                reason: "empty sample id".to_string(),
            });
        }
        if self.turns.is_empty() {
            return Err(invalid("no turns".to_string()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != expected {
                return Err(invalid(format!(
                    "turn {i} has role {:?}, expected strict user/assistant alternation",
                    turn.role
                )));
            }
        }
        let image_count: usize = self
            .turns
            .iter()
            .map(|t| count_occurrences(&t.text, IMAGE_PLACEHOLDER))
            .sum();
        if image_count > 1 {
            return Err(invalid(format!("{image_count} {IMAGE_PLACEHOLDER} placeholders, at most one allowed")));
        }
        if image_count == 1 && count_occurrences(&self.turns[0].text, IMAGE_PLACEHOLDER) != 1 {
            return Err(invalid(format!(
                "{IMAGE_PLACEHOLDER} must appear in the first user turn"
            )));
        }
        for turn in &self.turns {
            if turn.role == Role::Assistant && turn.text.contains(MASK_PLACEHOLDER) {
                return Err(invalid(format!(
                    "{MASK_PLACEHOLDER} placeholder in assistant turn"
                )));
            }
        }
        let placeholders = self.mask_placeholder_count();
        if placeholders != self.masks.len() {
            return Err(DataError::MaskCountMismatch {
                sample_id: id.clone(),
                masks: self.masks.len(),
                placeholders,
            });
        }
        if !self.masks.is_empty() && self.depth.is_none() {
            return Err(DataError::MissingDepth {
                sample_id: id.clone(),
            });
        }
        let (h, w, c) = self.image.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(invalid(format!("image shape ({h}, {w}, {c}) invalid")));
        }
        for &v in self.image.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("image value {v} outside [0, 1]")));
            }
        }
        if let Some(depth) = &self.depth {
            if depth.dim() != (h, w) {
                return Err(invalid(format!(
                    "depth shape {:?} does not match image ({h}, {w})",
                    depth.dim()
                )));
            }
            for &v in depth.iter() {
                if !v.is_finite() || v < 0.0 {
                    return Err(invalid(format!("depth value {v} not a finite non-negative meter count")));
                }
            }
        }
        for (i, mask) in self.masks.iter().enumerate() {
            if mask.h == 0 || mask.w == 0 {
                return Err(invalid(format!("mask {i} has zero dimension")));
            }
            mask.decode()?;
        }
        Ok(())
    }
}
