//! Dataset records, mask codecs, loading, and synthetic scene generation.

mod loader;
mod rle;
mod synth;
mod types;

pub use loader::{load_dataset, parse_record_line, write_dataset};
pub use rle::{decode_rle, encode_rle};
pub use synth::{generate_toy_dataset, render_scene, sample_scene, SceneObject, SceneSpec, SynthConfig};
pub use types::{
    parse_categories, ConversationSample, DataError, MaskPayload, QuestionType, RegionMask, Role,
    Turn, ALL_CATEGORIES, IMAGE_PLACEHOLDER, MASK_PLACEHOLDER,
};
