use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Assigns claims to `train`/`val`/`test`.
///
/// `train` is the fraction of all claims reserved for training; `val` is the
/// fraction of that training portion carved out for validation. Each split
/// keeps the dataset's claim order.
pub fn split_dataset(d: &Dataset, train: f64, val: f64, seed: u64) -> Result<Dataset> {
    if !(train > 0.0 && train < 1.0) || !(0.0..1.0).contains(&val) {
        return Err(Error::InvalidConfig(format!(
            "split fractions must satisfy 0 < train < 1 and 0 <= val < 1 (got {train}, {val})"
        )));
    }
    let n = d.claims.len();
    let train_portion = (train * n as f64).round() as usize;
    let n_val = (val * train_portion as f64).round() as usize;
    let n_train = train_portion.saturating_sub(n_val);
    let n_test = n.saturating_sub(train_portion);
    if n_train == 0 || n_test == 0 || (val > 0.0 && n_val == 0) {
        return Err(Error::TooFewClaims(n));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_set: HashSet<usize> = order[..n_val].iter().copied().collect();
    let train_set: HashSet<usize> = order[n_val..train_portion].iter().copied().collect();

    let mut splits: BTreeMap<String, Vec<String>> = ["train", "val", "test"]
        .iter()
        .map(|s| (s.to_string(), Vec::new()))
        .collect();
    for (i, c) in d.claims.iter().enumerate() {
        let name = if val_set.contains(&i) {
            "val"
        } else if train_set.contains(&i) {
            "train"
        } else {
            "test"
        };
        splits.get_mut(name).expect("split exists").push(c.id.clone());
    }
    let mut out = d.clone();
    out.splits = splits;
    Ok(out)
}
