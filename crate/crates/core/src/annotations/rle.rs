use serde::{Deserialize, Serialize};

use crate::error::{Result, WssisError};
use crate::mask::BinaryMask;

/// Uncompressed COCO run-length encoding: column-major run lengths that
/// start with a (possibly empty) run of zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

pub fn encode_rle(mask: &BinaryMask) -> Result<Rle> {
    let (h, w) = (mask.height(), mask.width());
    if h == 0 || w == 0 {
        return Err(WssisError::InvalidShape(format!("cannot encode a {h}x{w} grid")));
    }
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Ok(Rle {
        size: [h, w],
        counts,
    })
}

pub fn decode_rle(rle: &Rle, height: usize, width: usize) -> Result<BinaryMask> {
    let total: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
    if total != (height * width) as u64 {
        return Err(WssisError::CorruptAnnotation(format!(
            "RLE counts sum to {total}, expected {height}x{width} = {}",
            height * width
        )));
    }
    let mut mask = BinaryMask::new(height, width);
    let mut pos = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let on = i % 2 == 1;
        for p in pos..pos + c as usize {
            if on {
                mask.set(p % height, p / height, true);
            }
        }
        pos += c as usize;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_and_all_one() {
        assert_eq!(encode_rle(&BinaryMask::new(2, 2)).unwrap().counts, vec![4]);
        let ones = BinaryMask::from_fn(2, 2, |_, _| true);
        assert_eq!(encode_rle(&ones).unwrap().counts, vec![0, 4]);
        let rle = Rle {
            size: [2, 2],
            counts: vec![4],
        };
        assert!(decode_rle(&rle, 2, 2).unwrap().is_empty());
        let rle = Rle {
            size: [2, 2],
            counts: vec![0, 4],
        };
        assert_eq!(decode_rle(&rle, 2, 2).unwrap(), ones);
    }

    #[test]
    fn column_major_pattern() {
        // Column-major order: (r0,c0) (r1,c0) (r0,c1) (r1,c1); counts [1,2,1]
        // set positions 1 and 2 -> (row1,col0) and (row0,col1).
        let rle = Rle {
            size: [2, 2],
            counts: vec![1, 2, 1],
        };
        let m = decode_rle(&rle, 2, 2).unwrap();
        assert!(!m.get(0, 0) && m.get(1, 0) && m.get(0, 1) && !m.get(1, 1));
        assert_eq!(encode_rle(&m).unwrap(), rle);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            encode_rle(&BinaryMask::new(0, 3)),
            Err(WssisError::InvalidShape(_))
        ));
        let rle = Rle {
            size: [2, 2],
            counts: vec![1, 2],
        };
        assert!(matches!(
            decode_rle(&rle, 2, 2),
            Err(WssisError::CorruptAnnotation(_))
        ));
    }

    #[test]
    fn random_8x8_seed0_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let bits: Vec<u8> = (0..64).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let m = BinaryMask::from_vec(8, 8, bits).unwrap();
        let back = decode_rle(&encode_rle(&m).unwrap(), 8, 8).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip_identity(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(any::<bool>(), 144)) {
            let m = BinaryMask::from_fn(h, w, |y, x| bits[y * 12 + x]);
            let rle = encode_rle(&m).unwrap();
            prop_assert_eq!(rle.counts.iter().map(|&c| c as usize).sum::<usize>(), h * w);
            prop_assert_eq!(decode_rle(&rle, h, w).unwrap(), m);
        }
    }
}
