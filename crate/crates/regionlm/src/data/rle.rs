//! Row-major run-length codec for binary masks.
//!
//! Counts alternate between runs of zeros and runs of ones, always starting
//! with the zero run; a mask that begins with a one therefore starts with a
//! zero count. Canonical output never contains an interior zero-length run
//! and never ends with one, but the decoder accepts any counts whose sum
//! matches the cell total.

use ndarray::{Array2, ArrayView2};

use super::types::DataError;

pub fn decode_rle(counts: &[usize], h: usize, w: usize) -> Result<Array2<u8>, DataError> {
    let cells = h
        .checked_mul(w)
        .ok_or(DataError::MaskTooLarge { h, w })?;
    let mut covered: usize = 0;
    for &c in counts {
        covered = covered
            .checked_add(c)
            .ok_or(DataError::RleLength { covered: usize::MAX, expected: cells })?;
    }
    if covered != cells {
        return Err(DataError::RleLength { covered, expected: cells });
    }
    let mut flat = Vec::with_capacity(cells);
    let mut value = 0u8;
    for &c in counts {
        flat.resize(flat.len() + c, value);
        value ^= 1;
    }
    Ok(Array2::from_shape_vec((h, w), flat).expect("length checked against h*w"))
}

pub fn encode_rle(mask: &ArrayView2<u8>) -> Vec<usize> {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for &v in mask.iter() {
        let v = u8::from(v != 0);
        if v == current {
            run += 1;
        } else {
            counts.push(run);
            current = v;
            run = 1;
        }
    }
    if run > 0 || counts.is_empty() {
        counts.push(run);
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn three_by_two_example() {
        let mask = array![[0u8, 1, 1], [1, 0, 0]];
        assert_eq!(encode_rle(&mask.view()), vec![1, 3, 2]);
        assert_eq!(decode_rle(&[1, 3, 2], 2, 3).unwrap(), mask);
    }

    #[test]
    fn all_zeros_and_all_ones() {
        let zeros = Array2::<u8>::zeros((2, 3));
        assert_eq!(encode_rle(&zeros.view()), vec![6]);
        let ones = Array2::<u8>::ones((2, 3));
        assert_eq!(encode_rle(&ones.view()), vec![0, 6]);
        assert_eq!(decode_rle(&[6], 2, 3).unwrap(), zeros);
        assert_eq!(decode_rle(&[0, 6], 2, 3).unwrap(), ones);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            decode_rle(&[1, 3], 2, 3),
            Err(DataError::RleLength { covered: 4, expected: 6 })
        ));
        assert!(matches!(
            decode_rle(&[7], 2, 3),
            Err(DataError::RleLength { covered: 7, expected: 6 })
        ));
    }

    #[test]
    fn interior_zero_runs_accepted() {
        let mask = decode_rle(&[1, 0, 5], 2, 3).unwrap();
        assert_eq!(mask, Array2::<u8>::zeros((2, 3)));
    }

    #[test]
    fn overflowing_counts_rejected() {
        assert!(decode_rle(&[usize::MAX, usize::MAX], 2, 3).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(0u8..=1, 0..144)) {
            let mut flat = bits;
            flat.resize(h * w, 0);
            let mask = Array2::from_shape_vec((h, w), flat).unwrap();
            let counts = encode_rle(&mask.view());
            let decoded = decode_rle(&counts, h, w).unwrap();
            prop_assert_eq!(decoded, mask);
            // canonical form: no interior zero runs, no trailing zero run
            for (i, &c) in counts.iter().enumerate() {
                if i > 0 {
                    prop_assert!(c > 0);
                }
            }
        }
    }
}
