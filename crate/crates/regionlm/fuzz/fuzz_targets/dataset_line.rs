//! One JSONL dataset record: any input must parse or error, never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    // nonexistent base: records referencing image paths fail cleanly instead
    // of touching the real filesystem
    let _ = regionlm::data::parse_record_line(line, Path::new("/nonexistent"));
});
