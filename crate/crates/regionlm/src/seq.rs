//! Byte-level tokenizer, chat template, and embedding-sequence assembly.
//!
//! The vocabulary is 256 byte tokens plus nine specials. Conversations
//! render as `<bos>` followed by `<|user|>` / `<|assistant|>` turns, each
//! closed by `<|end|>`. In user text, `<image>` marks where the image token
//! block is spliced in and each `<mask>` expands to a `<mask_rgb>`
//! `<mask_depth>` pair that is substituted by region embeddings; the k-th
//! pair binds the k-th region mask. Targets are shifted by one: the loss
//! mask selects positions whose successor is assistant text or `<|end|>`.

use ndarray::{Array2, ArrayView2};

use crate::connector::TokenEmbeddings;
use crate::data::{Role, Turn, IMAGE_PLACEHOLDER, MASK_PLACEHOLDER};
use crate::encoder::Modality;
use crate::refiner::RegionEmbedding;
use crate::ModelError;

pub const BYTE_TOKENS: usize = 256;
pub const VOCAB_SIZE: usize = BYTE_TOKENS + SPECIALS.len();

/// Special-token strings in id order starting at [`BYTE_TOKENS`].
pub const SPECIALS: [&str; 9] = [
    "<image>",
    "<mask_rgb>",
    "<mask_depth>",
    "<bos>",
    "<eos>",
    "<|user|>",
    "<|assistant|>",
    "<|end|>",
    "<pad>",
];

pub const IMAGE_ID: u32 = 256;
pub const MASK_RGB_ID: u32 = 257;
pub const MASK_DEPTH_ID: u32 = 258;
pub const BOS_ID: u32 = 259;
pub const EOS_ID: u32 = 260;
pub const USER_ID: u32 = 261;
pub const ASSISTANT_ID: u32 = 262;
pub const END_ID: u32 = 263;
pub const PAD_ID: u32 = 264;

/// Greedy byte-level tokenization; special strings match before raw bytes,
/// longest special first.
pub fn tokenize(text: &str) -> Vec<u32> {
    // longest-first so overlapping special spellings cannot mis-split
    let mut by_len: Vec<(usize, &str)> = SPECIALS.iter().enumerate().map(|(i, s)| (i, *s)).collect();
    by_len.sort_by_key(|&(_, s)| std::cmp::Reverse(s.len()));
    let bytes = text.as_bytes();
    let mut ids = Vec::with_capacity(bytes.len());
    let mut pos = 0;
    'outer: while pos < bytes.len() {
        for &(idx, s) in &by_len {
            if bytes[pos..].starts_with(s.as_bytes()) {
                ids.push(BYTE_TOKENS as u32 + idx as u32);
                pos += s.len();
                continue 'outer;
            }
        }
        ids.push(u32::from(bytes[pos]));
        pos += 1;
    }
    ids
}

/// Inverse of [`tokenize`]; invalid UTF-8 byte runs decode lossily and ids
/// outside the vocabulary are skipped.
pub fn detokenize(ids: &[u32]) -> String {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < BYTE_TOKENS as u32 {
            bytes.push(id as u8);
        } else if let Some(s) = SPECIALS.get(id as usize - BYTE_TOKENS) {
            bytes.extend_from_slice(s.as_bytes());
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Renders turns into the flat chat string the tokenizer consumes.
pub fn render_chat(turns: &[Turn]) -> Result<String, ModelError> {
    check_alternation(turns)?;
    let mut out = String::from(SPECIALS[(BOS_ID - 256) as usize]);
    for turn in turns {
        out.push_str(match turn.role {
            Role::User => SPECIALS[(USER_ID - 256) as usize],
            Role::Assistant => SPECIALS[(ASSISTANT_ID - 256) as usize],
        });
        out.push_str(&turn.text);
        out.push_str(SPECIALS[(END_ID - 256) as usize]);
    }
    Ok(out)
}

/// Rewrites each `<mask>` placeholder into the `<mask_rgb><mask_depth>` pair.
pub fn expand_region_placeholders(text: &str) -> String {
    text.replace(MASK_PLACEHOLDER, "<mask_rgb><mask_depth>")
}

fn check_alternation(turns: &[Turn]) -> Result<(), ModelError> {
    if turns.is_empty() {
        return Err(ModelError::RoleOrder("conversation has no turns".into()));
    }
    for (i, turn) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if turn.role != expected {
            return Err(ModelError::RoleOrder(format!(
                "turn {i} is {:?}, expected alternation starting with user",
                turn.role
            )));
        }
    }
    Ok(())
}

/// One sequence position before embedding substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Ordinary token; `predict` marks assistant text and its `<|end|>`.
    Token { id: u32, predict: bool },
    /// Expands to the image token block.
    Image,
    RegionRgb(usize),
    RegionDepth(usize),
}

/// Where each assembled position came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Text,
    ImageToken,
    RegionRgb(usize),
    RegionDepth(usize),
}

/// Token-level layout of a conversation, independent of any embeddings.
#[derive(Debug, Clone)]
pub struct AssemblyPlan {
    pub slots: Vec<Slot>,
    pub n_masks: usize,
    pub has_image: bool,
}

impl AssemblyPlan {
    /// Sequence length once the image slot expands to `n_vis` positions.
    pub fn expected_len(&self, n_vis: usize) -> usize {
        self.slots
            .iter()
            .map(|s| if matches!(s, Slot::Image) { n_vis } else { 1 })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlanMode {
    /// Full conversation for training; loss positions marked.
    Train,
    /// Prompt ending in a user turn, with a trailing assistant marker.
    Prompt,
}

fn build_plan(turns: &[Turn], n_masks: usize, mode: PlanMode) -> Result<AssemblyPlan, ModelError> {
    check_alternation(turns)?;
    if mode == PlanMode::Prompt && turns.last().map(|t| t.role) != Some(Role::User) {
        return Err(ModelError::RoleOrder(
            "prompt must end with a user turn".into(),
        ));
    }
    let mut slots = vec![Slot::Token { id: BOS_ID, predict: false }];
    let mut region_count = 0usize;
    let mut image_count = 0usize;
    for (t_idx, turn) in turns.iter().enumerate() {
        let (marker, is_assistant) = match turn.role {
            Role::User => (USER_ID, false),
            Role::Assistant => (ASSISTANT_ID, true),
        };
        slots.push(Slot::Token { id: marker, predict: false });
        let ids = tokenize(&expand_region_placeholders(&turn.text));
        let mut i = 0;
        while i < ids.len() {
            match ids[i] {
                IMAGE_ID => {
                    if t_idx != 0 {
                        return Err(ModelError::Shape(format!(
                            "{IMAGE_PLACEHOLDER} outside the first user turn"
                        )));
                    }
                    image_count += 1;
                    if image_count > 1 {
                        return Err(ModelError::Shape(format!(
                            "more than one {IMAGE_PLACEHOLDER} placeholder"
                        )));
                    }
                    slots.push(Slot::Image);
                }
                MASK_RGB_ID => {
                    if is_assistant {
                        return Err(ModelError::Shape(
                            "region placeholder in assistant turn".into(),
                        ));
                    }
                    if ids.get(i + 1) != Some(&MASK_DEPTH_ID) {
                        return Err(ModelError::Shape(
                            "unpaired <mask_rgb> region tag".into(),
                        ));
                    }
                    slots.push(Slot::RegionRgb(region_count));
                    slots.push(Slot::RegionDepth(region_count));
                    region_count += 1;
                    i += 1;
                }
                MASK_DEPTH_ID => {
                    return Err(ModelError::Shape(
                        "unpaired <mask_depth> region tag".into(),
                    ));
                }
                id => {
                    slots.push(Slot::Token { id, predict: is_assistant });
                }
            }
            i += 1;
        }
        slots.push(Slot::Token { id: END_ID, predict: is_assistant });
    }
    if mode == PlanMode::Prompt {
        slots.push(Slot::Token { id: ASSISTANT_ID, predict: false });
    }
    if region_count != n_masks {
        return Err(ModelError::RegionCountMismatch {
            masks: n_masks,
            placeholders: region_count,
        });
    }
    Ok(AssemblyPlan { slots, n_masks, has_image: image_count == 1 })
}

/// Plans a full conversation for training.
pub fn plan_conversation(turns: &[Turn], n_masks: usize) -> Result<AssemblyPlan, ModelError> {
    build_plan(turns, n_masks, PlanMode::Train)
}

/// Plans a generation prompt: the turns must end with a user turn, and the
/// plan closes with an `<|assistant|>` marker ready for decoding.
pub fn plan_prompt(turns: &[Turn], n_masks: usize) -> Result<AssemblyPlan, ModelError> {
    build_plan(turns, n_masks, PlanMode::Prompt)
}

/// Embedding sequence ready for the language model.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    /// `(len, lm_dim)` rows, before positional embeddings.
    pub embeddings: Array2<f64>,
    pub provenance: Vec<Provenance>,
    /// Token id occupying each position; `None` for substituted embeddings.
    pub token_ids: Vec<Option<u32>>,
    /// `loss_mask[i]` selects positions whose successor must be predicted.
    pub loss_mask: Vec<bool>,
    /// `targets[i]` is the successor token id; valid only under the mask.
    pub targets: Vec<u32>,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Replaces plan slots with embedding rows: token rows from the embedding
/// table, the image slot with the connector token block, and region tags
/// with pooled region embeddings.
pub fn assemble(
    plan: &AssemblyPlan,
    image_tokens: Option<&TokenEmbeddings>,
    regions: &[(RegionEmbedding, RegionEmbedding)],
    tok_emb: &ArrayView2<f64>,
) -> Result<EmbeddingSequence, ModelError> {
    if tok_emb.nrows() != VOCAB_SIZE {
        return Err(ModelError::Shape(format!(
            "embedding table has {} rows, vocabulary is {VOCAB_SIZE}",
            tok_emb.nrows()
        )));
    }
    let lm_dim = tok_emb.ncols();
    if plan.has_image && image_tokens.is_none() {
        return Err(ModelError::MissingImageTokens);
    }
    if !plan.has_image && image_tokens.is_some() {
        return Err(ModelError::Shape(
            "image tokens provided but the text has no <image> placeholder".into(),
        ));
    }
    if regions.len() != plan.n_masks {
        return Err(ModelError::RegionCountMismatch {
            masks: regions.len(),
            placeholders: plan.n_masks,
        });
    }
    for (k, (rgb, depth)) in regions.iter().enumerate() {
        if rgb.modality != Modality::Rgb || depth.modality != Modality::Depth {
            return Err(ModelError::ModalityMismatch(format!(
                "region {k} embeddings must be (rgb, depth)"
            )));
        }
        if rgb.values.len() != lm_dim || depth.values.len() != lm_dim {
            return Err(ModelError::Shape(format!(
                "region {k} embedding width does not match lm_dim {lm_dim}"
            )));
        }
    }
    if let Some(tokens) = image_tokens {
        if tokens.values.ncols() != lm_dim {
            return Err(ModelError::Shape(format!(
                "image token width {} does not match lm_dim {lm_dim}",
                tokens.values.ncols()
            )));
        }
    }
    let n_vis = image_tokens.map_or(0, TokenEmbeddings::count);
    let len = plan.expected_len(n_vis);
    let mut embeddings = Array2::zeros((len, lm_dim));
    let mut provenance = Vec::with_capacity(len);
    let mut token_ids = Vec::with_capacity(len);
    let mut predict = Vec::with_capacity(len);
    let mut row = 0usize;
    for slot in &plan.slots {
        match *slot {
            Slot::Token { id, predict: p } => {
                embeddings.row_mut(row).assign(&tok_emb.row(id as usize));
                provenance.push(Provenance::Text);
                token_ids.push(Some(id));
                predict.push(p);
                row += 1;
            }
            Slot::Image => {
                let tokens = image_tokens.expect("checked above");
                for r in 0..tokens.count() {
                    embeddings.row_mut(row).assign(&tokens.values.row(r));
                    provenance.push(Provenance::ImageToken);
                    token_ids.push(None);
                    predict.push(false);
                    row += 1;
                }
            }
            Slot::RegionRgb(k) => {
                embeddings.row_mut(row).assign(&regions[k].0.values);
                provenance.push(Provenance::RegionRgb(k));
                token_ids.push(None);
                predict.push(false);
                row += 1;
            }
            Slot::RegionDepth(k) => {
                embeddings.row_mut(row).assign(&regions[k].1.values);
                provenance.push(Provenance::RegionDepth(k));
                token_ids.push(None);
                predict.push(false);
                row += 1;
            }
        }
    }
    debug_assert_eq!(row, len);
    let mut loss_mask = vec![false; len];
    let mut targets = vec![0u32; len];
    for i in 0..len.saturating_sub(1) {
        if predict[i + 1] {
            let id = token_ids[i + 1].expect("only token slots carry predict");
            loss_mask[i] = true;
            targets[i] = id;
        }
    }
    Ok(EmbeddingSequence { embeddings, provenance, token_ids, loss_mask, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;

    fn user(text: &str) -> Turn {
        Turn { role: Role::User, text: text.into() }
    }

    fn assistant(text: &str) -> Turn {
        Turn { role: Role::Assistant, text: text.into() }
    }

    #[test]
    fn vocabulary_layout() {
        assert_eq!(VOCAB_SIZE, 265);
        assert_eq!(tokenize("<image>"), vec![IMAGE_ID]);
        assert_eq!(tokenize("<pad>"), vec![PAD_ID]);
        assert_eq!(tokenize("ab"), vec![97, 98]);
    }

    #[test]
    fn specials_never_alias_bytes() {
        for (i, s) in SPECIALS.iter().enumerate() {
            let ids = tokenize(s);
            assert_eq!(ids, vec![BYTE_TOKENS as u32 + i as u32]);
        }
    }

    #[test]
    fn almost_special_text_stays_bytes() {
        let ids = tokenize("<imagine <mask_x <bos");
        assert!(ids.iter().all(|&id| id < BYTE_TOKENS as u32));
        assert_eq!(detokenize(&ids), "<imagine <mask_x <bos");
    }

    #[test]
    fn render_chat_three_turn_fixture() {
        let turns = [user("hi"), assistant("yo"), user("bye?")];
        let s = render_chat(&turns).unwrap();
        assert_eq!(s, "<bos><|user|>hi<|end|><|assistant|>yo<|end|><|user|>bye?<|end|>");
    }

    #[test]
    fn alternation_enforced() {
        let turns = [assistant("hello")];
        assert!(matches!(render_chat(&turns), Err(ModelError::RoleOrder(_))));
        let turns = [user("a"), user("b")];
        assert!(matches!(render_chat(&turns), Err(ModelError::RoleOrder(_))));
    }

    #[test]
    fn expansion_rewrites_each_placeholder() {
        let text = "a <mask> b <mask>";
        assert_eq!(expand_region_placeholders(text), "a <mask_rgb><mask_depth> b <mask_rgb><mask_depth>");
    }

    fn table(lm_dim: usize) -> Array2<f64> {
        Array2::from_shape_fn((VOCAB_SIZE, lm_dim), |(i, j)| (i * lm_dim + j) as f64 * 1e-3)
    }

    fn region(modality: Modality, lm_dim: usize, fill: f64) -> RegionEmbedding {
        RegionEmbedding { modality, values: Array1::from_elem(lm_dim, fill) }
    }

    fn image_tokens(n: usize, lm_dim: usize) -> TokenEmbeddings {
        TokenEmbeddings {
            modality: Modality::Rgb,
            values: Array2::from_shape_fn((n, lm_dim), |(i, j)| (i + j) as f64),
            grid_shape: (1, n),
        }
    }

    #[test]
    fn assembled_layout_and_loss_mask() {
        let turns = [user("<image>\nq <mask>?"), assistant("ok")];
        let plan = plan_conversation(&turns, 1).unwrap();
        let tok = table(4);
        let regions = [(region(Modality::Rgb, 4, 1.0), region(Modality::Depth, 4, 2.0))];
        let img = image_tokens(3, 4);
        let seq = assemble(&plan, Some(&img), &regions, &tok.view()).unwrap();
        // <bos> <|user|> [img x3] \n q space [rgb] [depth] ? <|end|>
        // <|assistant|> o k <|end|>
        let expected_len = plan.expected_len(3);
        assert_eq!(seq.len(), expected_len);
        let image_rows: Vec<usize> = seq
            .provenance
            .iter()
            .enumerate()
            .filter(|(_, p)| matches!(p, Provenance::ImageToken))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(image_rows, vec![2, 3, 4]);
        let rgb_row = seq.provenance.iter().position(|p| matches!(p, Provenance::RegionRgb(0))).unwrap();
        assert!(matches!(seq.provenance[rgb_row + 1], Provenance::RegionDepth(0)));
        assert!((seq.embeddings[(rgb_row, 0)] - 1.0).abs() < 1e-12);
        assert!((seq.embeddings[(rgb_row + 1, 0)] - 2.0).abs() < 1e-12);
        // loss positions: predictions of "o", "k", final <|end|>
        let n_pred = seq.loss_mask.iter().filter(|&&m| m).count();
        assert_eq!(n_pred, 3);
        for i in 0..seq.len() {
            if seq.loss_mask[i] {
                let target = seq.targets[i];
                assert_eq!(seq.token_ids[i + 1], Some(target));
                assert!(target == u32::from(b'o') || target == u32::from(b'k') || target == END_ID);
            }
        }
        assert!(!seq.loss_mask[seq.len() - 1]);
    }

    #[test]
    fn length_accounting_example() {
        // 20 pre-expansion tokens (3 structural + 14 letters + 1 <image> +
        // 2 <mask>); with 64 image tokens: 20 - 3 + 64 + 2*2 = 85
        let turns = [user("<image>ab<mask>cd<mask>efghijklmn")];
        let plan = plan_conversation(&turns, 2).unwrap();
        assert_eq!(plan.expected_len(64), 85);
        // and the general formula for a small case
        let small = [user("<image>x<mask>y")];
        let plan = plan_conversation(&small, 1).unwrap();
        let n_text = 3 + 2 + 2; // structural + letters + placeholders
        assert_eq!(plan.expected_len(4), n_text - 2 + 4 + 2);
    }

    #[test]
    fn region_count_mismatch_rejected() {
        let turns = [user("<mask> a")];
        assert!(matches!(
            plan_conversation(&turns, 2),
            Err(ModelError::RegionCountMismatch { masks: 2, placeholders: 1 })
        ));
    }

    #[test]
    fn missing_image_tokens_rejected() {
        let turns = [user("<image> a")];
        let plan = plan_conversation(&turns, 0).unwrap();
        let tok = table(4);
        assert!(matches!(
            assemble(&plan, None, &[], &tok.view()),
            Err(ModelError::MissingImageTokens)
        ));
    }

    #[test]
    fn swapped_modalities_rejected() {
        let turns = [user("q <mask>")];
        let plan = plan_conversation(&turns, 1).unwrap();
        let tok = table(4);
        let regions = [(region(Modality::Depth, 4, 1.0), region(Modality::Rgb, 4, 2.0))];
        assert!(matches!(
            assemble(&plan, None, &regions, &tok.view()),
            Err(ModelError::ModalityMismatch(_))
        ));
    }

    #[test]
    fn prompt_plan_ends_with_assistant_marker() {
        let turns = [user("q?")];
        let plan = plan_prompt(&turns, 0).unwrap();
        assert_eq!(*plan.slots.last().unwrap(), Slot::Token { id: ASSISTANT_ID, predict: false });
        let full = [user("q?"), assistant("a")];
        assert!(matches!(plan_prompt(&full, 0), Err(ModelError::RoleOrder(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn tokenize_round_trips(text in "[ -~]{0,60}") {
            let ids = tokenize(&text);
            prop_assert_eq!(detokenize(&ids), text);
            prop_assert!(ids.iter().all(|&id| (id as usize) < VOCAB_SIZE));
        }

        #[test]
        fn tokenize_round_trips_unicode(text in "\\PC{0,24}") {
            let ids = tokenize(&text);
            prop_assert_eq!(detokenize(&ids), text);
        }
    }
}
