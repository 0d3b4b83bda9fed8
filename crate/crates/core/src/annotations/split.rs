use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::CocoDocument;
use crate::error::{Result, WssisError};
use crate::rng::rng_from;

/// Partition of image ids into fully labeled and point labeled sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub full_ids: BTreeSet<u64>,
    pub point_ids: BTreeSet<u64>,
    pub fraction: f64,
    pub seed: u64,
}

/// Randomly keeps `round(fraction * n)` images fully labeled; the rest
/// become point labeled.
pub fn split_dataset(doc: &CocoDocument, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(WssisError::Config(format!(
            "split fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut ids = doc.image_ids();
    ids.sort_unstable();
    let n_full = (fraction * ids.len() as f64).round() as usize;
    ids.shuffle(&mut rng_from(seed));
    let full_ids: BTreeSet<u64> = ids[..n_full].iter().copied().collect();
    let point_ids: BTreeSet<u64> = ids[n_full..].iter().copied().collect();
    Ok(DatasetSplit {
        full_ids,
        point_ids,
        fraction,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::ImageInfo;
    use proptest::prelude::*;

    fn doc_with(n: u64) -> CocoDocument {
        CocoDocument {
            images: (1..=n)
                .map(|id| ImageInfo {
                    id,
                    file_name: format!("{id}.png"),
                    width: 4,
                    height: 4,
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn full_fraction_leaves_no_point_images() {
        let s = split_dataset(&doc_with(7), 1.0, 3).unwrap();
        assert!(s.point_ids.is_empty());
        assert_eq!(s.full_ids.len(), 7);
    }

    #[test]
    fn ten_percent_of_hundred() {
        let doc = doc_with(100);
        let s = split_dataset(&doc, 0.1, 0).unwrap();
        assert_eq!(s.full_ids.len(), 10);
        assert_eq!(s.point_ids.len(), 90);
        assert!(s.full_ids.is_disjoint(&s.point_ids));
        assert_eq!(s, split_dataset(&doc, 0.1, 0).unwrap());
    }

    #[test]
    fn out_of_range_fraction_is_config_error() {
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(split_dataset(&doc_with(3), f, 0), Err(WssisError::Config(_))));
        }
    }

    proptest! {
        #[test]
        fn split_partitions_ids(n in 1u64..200, fraction in 0.001f64..=1.0, seed in any::<u64>()) {
            let doc = doc_with(n);
            let s = split_dataset(&doc, fraction, seed).unwrap();
            let all: BTreeSet<u64> = doc.image_ids().into_iter().collect();
            let union: BTreeSet<u64> = s.full_ids.union(&s.point_ids).copied().collect();
            prop_assert_eq!(union, all);
            prop_assert!(s.full_ids.is_disjoint(&s.point_ids));
            prop_assert_eq!(s.full_ids.len(), (fraction * n as f64).round() as usize);
            prop_assert_eq!(s.clone(), split_dataset(&doc, fraction, seed).unwrap());
        }
    }
}
