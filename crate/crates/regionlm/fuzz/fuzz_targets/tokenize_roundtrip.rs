//! Tokenizer stability: tokenize . detokenize must be idempotent on ids.

#![no_main]

use libfuzzer_sys::fuzz_target;
use regionlm::seq::{detokenize, tokenize};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let ids = tokenize(&text);
    let rendered = detokenize(&ids);
    assert_eq!(tokenize(&rendered), ids, "second tokenize pass disagrees");
});
