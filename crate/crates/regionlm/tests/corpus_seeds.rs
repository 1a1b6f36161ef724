//! Replays the fuzz corpus seeds through the same entry points the fuzz
//! targets drive, so the ordinary test run covers every checked-in seed.

use std::fs;
use std::path::{Path, PathBuf};

use regionlm::data::QuestionType;
use regionlm::eval::{classify_answer, classify_question, normalize_answer};

fn corpus_dir(target: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fuzz/corpus")
        .join(target)
}

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = corpus_dir(target);
    let mut out: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("corpus dir {} missing: {e}", dir.display()))
        .map(|entry| {
            let path = entry.expect("dir entry").path();
            let bytes = fs::read(&path).expect("seed bytes");
            (path, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds checked in under {}", dir.display());
    out
}

#[test]
fn dataset_line_seeds_replay() {
    let empty = tempfile::tempdir().expect("tempdir");
    for (path, bytes) in seeds("dataset_line") {
        let Ok(line) = std::str::from_utf8(&bytes) else {
            panic!("{} is not utf-8", path.display())
        };
        let _ = regionlm::data::parse_record_line(line, empty.path());
    }
}

#[test]
fn rle_decode_seeds_replay() {
    for (path, data) in seeds("rle_decode") {
        if data.len() < 4 {
            panic!("{} is shorter than the h,w header", path.display());
        }
        let h = u16::from_le_bytes([data[0], data[1]]) as usize;
        let w = u16::from_le_bytes([data[2], data[3]]) as usize;
        let counts: Vec<usize> = data[4..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        if let Ok(mask) = regionlm::data::decode_rle(&counts, h, w) {
            let re = regionlm::data::encode_rle(&mask.view());
            let again = regionlm::data::decode_rle(&re, h, w).expect("re-encoded counts decode");
            assert_eq!(mask, again, "{} round trip", path.display());
        }
    }
}

#[test]
fn tokenize_roundtrip_seeds_replay() {
    for (path, bytes) in seeds("tokenize_roundtrip") {
        let text = String::from_utf8_lossy(&bytes);
        let ids = regionlm::seq::tokenize(&text);
        let rendered = regionlm::seq::detokenize(&ids);
        assert_eq!(
            regionlm::seq::tokenize(&rendered),
            ids,
            "{} tokenize is not idempotent through detokenize",
            path.display()
        );
    }
}

#[test]
fn normalize_answer_seeds_replay() {
    const TYPES: [QuestionType; 4] = [
        QuestionType::LeftRight,
        QuestionType::Count,
        QuestionType::Distance,
        QuestionType::MultiChoice,
    ];
    for (path, bytes) in seeds("normalize_answer") {
        let Some((&sel, rest)) = bytes.split_first() else {
            panic!("{} is empty", path.display())
        };
        let qtype = TYPES[(sel % 4) as usize];
        let text = String::from_utf8_lossy(rest);
        let _ = classify_question(&text);
        let _ = classify_answer(&text);
        let _ = normalize_answer(&text, qtype);
    }
}

#[test]
fn config_parse_seeds_replay() {
    for (path, bytes) in seeds("config_parse") {
        let Ok(text) = std::str::from_utf8(&bytes) else {
            panic!("{} is not utf-8", path.display())
        };
        let _ = regionlm::config::parse_config(text);
    }
}

#[test]
fn checkpoint_load_seeds_replay() {
    let mut loaded = 0usize;
    for (_, bytes) in seeds("checkpoint_load") {
        if regionlm::checkpoint::load_checkpoint_bytes(&bytes).is_ok() {
            loaded += 1;
        }
    }
    assert!(loaded >= 1, "the intact checkpoint seed must load");
}
