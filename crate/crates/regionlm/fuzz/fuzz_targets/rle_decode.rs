//! Run-length mask decoding under arbitrary counts and dimensions.
//!
//! Input layout: two u16 little-endian dims, then u16 run counts. Valid
//! decodes must round-trip through encode_rle exactly.

#![no_main]

use libfuzzer_sys::fuzz_target;
use regionlm::data::{decode_rle, encode_rle};

fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let h = u16::from_le_bytes([data[0], data[1]]) as usize;
    let w = u16::from_le_bytes([data[2], data[3]]) as usize;
    let counts: Vec<usize> = data[4..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    if let Ok(mask) = decode_rle(&counts, h, w) {
        let again = encode_rle(&mask.view());
        let back = decode_rle(&again, h, w).expect("re-encoded runs must decode");
        assert_eq!(mask, back, "decode/encode/decode changed the mask");
    }
});
