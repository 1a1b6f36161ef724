//! Checkpoint archive decoding from raw bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = regionlm::checkpoint::load_checkpoint_bytes(data);
});
