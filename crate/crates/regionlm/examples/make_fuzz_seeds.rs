//! Regenerates the fuzz corpus seeds under `fuzz/corpus/`.
//!
//! Usage: `cargo run --example make_fuzz_seeds [-- <corpus-root>]`
//!
//! Seeds are deterministic so reruns leave the checked-in corpus unchanged.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use regionlm::checkpoint::save_checkpoint;
use regionlm::config::reference_toml;
use regionlm::data::{
    encode_rle, generate_toy_dataset, write_dataset, QuestionType, SynthConfig, ALL_CATEGORIES,
};
use regionlm::encoder::EncoderConfig;
use regionlm::lm::LmConfig;
use regionlm::model::{Model, ModelConfig};

fn write(dir: &Path, name: &str, bytes: &[u8]) {
    fs::create_dir_all(dir).expect("corpus dir");
    fs::write(dir.join(name), bytes).expect("seed write");
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        canvas: (16, 16),
        pixels_per_meter: 8.0,
        min_objects: 2,
        max_objects: 2,
        min_size: 3,
        max_size: 5,
        min_lr_separation: 4.0,
    }
}

fn dataset_line_seeds(root: &Path) {
    let dir = root.join("dataset_line");
    let cats: BTreeSet<QuestionType> = ALL_CATEGORIES.iter().copied().collect();
    let samples = generate_toy_dataset(10, 4, &cats, &small_synth()).expect("synth");
    let tmp = std::env::temp_dir().join("regionlm-seed-dataset.jsonl");
    write_dataset(&samples, &tmp).expect("dataset write");
    let text = fs::read_to_string(&tmp).expect("dataset read");
    let _ = fs::remove_file(&tmp);
    for (i, line) in text.lines().enumerate() {
        write(&dir, &format!("record_{i}.json"), line.as_bytes());
    }
    write(&dir, "truncated.json", text.lines().next().expect("line")[..40].as_bytes());
    write(
        &dir,
        "bad_mask_counts.json",
        br#"{"id":"x","image":{"inline":{"h":2,"w":2,"rgb":[0,0,0,0,0,0,0,0,0,0,0,0]}},"masks":[{"h":2,"w":2,"counts":[9]}],"turns":[{"role":"user","text":"<image> hi <mask>"},{"role":"assistant","text":"ok."}]}"#,
    );
}

fn rle_seeds(root: &Path) {
    let dir = root.join("rle_decode");
    let pack = |h: u16, w: u16, counts: &[u16]| -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + counts.len() * 2);
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        for c in counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    };
    let mut grid = ndarray::Array2::<u8>::zeros((8, 8));
    for y in 2..6 {
        for x in 3..7 {
            grid[(y, x)] = 1;
        }
    }
    let counts: Vec<u16> = encode_rle(&grid.view()).iter().map(|&c| c as u16).collect();
    write(&dir, "box_8x8.bin", &pack(8, 8, &counts));
    write(&dir, "empty_4x4.bin", &pack(4, 4, &[16]));
    write(&dir, "full_4x4.bin", &pack(4, 4, &[0, 16]));
    write(&dir, "sum_mismatch.bin", &pack(4, 4, &[3, 5]));
    write(&dir, "zero_dims.bin", &pack(0, 7, &[]));
    write(&dir, "overflow_counts.bin", &pack(2, 2, &[65535, 65535, 65535]));
}

fn tokenize_seeds(root: &Path) {
    let dir = root.join("tokenize_roundtrip");
    write(&dir, "plain.txt", b"Where is the box?");
    write(
        &dir,
        "specials.txt",
        b"<bos><|user|><image>\nthe crate <mask_rgb><mask_depth> sits left.<|end|><|assistant|>right.<|end|><eos><pad>",
    );
    write(&dir, "angle_noise.txt", b"a <mask unclosed <image<image>> <|user|x|> <maskdepth>");
    write(&dir, "utf8.txt", "caisse \u{e0} gauche \u{2192} 1.91 m".as_bytes());
}

fn normalize_seeds(root: &Path) {
    let dir = root.join("normalize_answer");
    let tag = |t: u8, text: &str| -> Vec<u8> {
        let mut v = vec![t];
        v.extend_from_slice(text.as_bytes());
        v
    };
    write(&dir, "lr_bare.bin", &tag(0, "left."));
    write(&dir, "lr_sentence.bin", &tag(0, "The pallet [Region 0] is on the left of the pallet [Region 1]."));
    write(&dir, "count_digits.bin", &tag(1, "3."));
    write(&dir, "count_words.bin", &tag(1, "There are three boxes."));
    write(&dir, "distance_decimal.bin", &tag(2, "The distance is 1.91 meters."));
    write(&dir, "distance_cm.bin", &tag(2, "It is 150 centimeters away."));
    write(&dir, "choice_region.bin", &tag(3, "[Region 1]."));
    write(&dir, "unparseable.bin", &tag(1, "I cannot tell."));
}

fn config_seeds(root: &Path) {
    let dir = root.join("config_parse");
    write(&dir, "reference.toml", reference_toml().as_bytes());
    write(&dir, "minimal.toml", b"seed = 3\n");
    write(&dir, "unknown_key.toml", b"[lm]\nlm_dims = 64\n");
    write(&dir, "bad_schema.toml", b"schema_version = 99\n");
    write(&dir, "not_toml.toml", b"{\"seed\": 3}");
}

fn checkpoint_seeds(root: &Path) {
    let dir = root.join("checkpoint_load");
    let config = ModelConfig {
        encoder: EncoderConfig { patch: 8, dim: 4, seed: 11 },
        connector_r: 2,
        refiner_layers: 1,
        lm: LmConfig {
            lm_dim: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            vocab_size: regionlm::seq::VOCAB_SIZE,
            max_seq: 32,
            seed: 12,
            tie_head: true,
        },
        seed: 13,
    };
    let model = Model::new(config).expect("tiny model");
    fs::create_dir_all(&dir).expect("corpus dir");
    save_checkpoint(&model, &dir.join("tiny.ckpt")).expect("checkpoint save");
    let bytes = fs::read(dir.join("tiny.ckpt")).expect("checkpoint read");
    write(&dir, "truncated.ckpt", &bytes[..64.min(bytes.len())]);
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xFF;
    write(&dir, "bad_magic.ckpt", &bad_magic);
    let mut flipped = bytes;
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x55;
    write(&dir, "flipped_byte.ckpt", &flipped);
}

fn main() {
    let root: PathBuf = std::env::args().nth(1).map_or_else(
        || Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus"),
        PathBuf::from,
    );
    dataset_line_seeds(&root);
    rle_seeds(&root);
    tokenize_seeds(&root);
    normalize_seeds(&root);
    config_seeds(&root);
    checkpoint_seeds(&root);
    println!("seeds written under {}", root.display());
}
