//! Seeded per-class train/test splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{DatasetManifest, SplitTag};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// `n_splits` independent partitions. Classes are leaf ids. In each split
/// every class contributes exactly `n_train` training samples and up to
/// `max_test` of its remaining samples as test. Output keeps manifest order.
pub fn random_class_splits(
    manifest: &DatasetManifest,
    n_train: usize,
    max_test: usize,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<(DatasetManifest, DatasetManifest)>> {
    if n_train == 0 || n_splits == 0 {
        return Err(Error::InvalidArgument("n_train and n_splits must be positive".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        by_class.entry(s.leaf_id.as_str()).or_default().push(i);
    }
    if let Some((class, members)) = by_class.iter().find(|(_, m)| m.len() <= n_train) {
        return Err(Error::Validation(format!(
            "class `{class}` has {} samples; needs at least {} for {n_train} training samples plus a test sample",
            members.len(),
            n_train + 1
        )));
    }
    let mut out = Vec::with_capacity(n_splits);
    for split in 0..n_splits {
        let mut rng = rng_from_seed(derive_seed(seed, "split", split as u64));
        let mut role = vec![None; manifest.len()];
        for members in by_class.values() {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            for (rank, &i) in shuffled.iter().enumerate() {
                if rank < n_train {
                    role[i] = Some(SplitTag::Train);
                } else if rank < n_train + max_test {
                    role[i] = Some(SplitTag::Test);
                }
            }
        }
        let pick = |tag: SplitTag| DatasetManifest {
            samples: manifest
                .samples
                .iter()
                .zip(&role)
                .filter(|(_, r)| **r == Some(tag))
                .map(|(s, _)| s.clone())
                .collect(),
            split_tag: tag,
        };
        out.push((pick(SplitTag::Train), pick(SplitTag::Test)));
    }
    Ok(out)
}
