use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Seeded ordering in which every prefix holds each class in proportion to
/// its size (within one item).
///
/// Each class is shuffled independently; item `j` of a class with `n_c`
/// members gets key `(j + 0.5) / n_c`, and items are merged by key (ties by
/// class index).
pub(crate) fn stratified_order(labels: &[usize], seed: u64) -> Vec<usize> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng(seed);
    let mut keyed = Vec::with_capacity(labels.len());
    for (class, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (j, &idx) in members.iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / n, class, idx));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, idx)| idx).collect()
}

/// Stratified seeded shuffle, then contiguous train/val/test slices of sizes
/// `round(train·n)`, `round(val·n)` and the remainder.
pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    let SplitFractions { train, val, test } = fractions;
    if [train, val, test].iter().any(|f| !(*f > 0.0)) {
        return Err(Error::InvalidArgument(format!("split fractions must be positive: {fractions:?}")));
    }
    if ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions sum to {}, expected 1",
            train + val + test
        )));
    }
    let n = dataset.len();
    let order = stratified_order(&dataset.labels(), seed);
    let n_train = ((train * n as f64).round() as usize).min(n);
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);
    Ok(Splits {
        train: dataset.subset(&order[..n_train]),
        val: dataset.subset(&order[n_train..n_train + n_val]),
        test: dataset.subset(&order[n_train + n_val..]),
    })
}
