//! Answer classification and extraction over arbitrary model output.

#![no_main]

use libfuzzer_sys::fuzz_target;
use regionlm::data::QuestionType;
use regionlm::eval::{classify_answer, classify_question, normalize_answer};

const TYPES: [QuestionType; 4] = [
    QuestionType::LeftRight,
    QuestionType::Count,
    QuestionType::Distance,
    QuestionType::MultiChoice,
];

fuzz_target!(|data: &[u8]| {
    let Some((&sel, rest)) = data.split_first() else { return };
    let text = String::from_utf8_lossy(rest);
    let _ = classify_question(&text);
    let _ = classify_answer(&text);
    let _ = normalize_answer(&text, TYPES[sel as usize % TYPES.len()]);
});
