//! Stratified train/validation/test splits, k-fold partitions and seeded
//! mini-batching.

use rand::seq::SliceRandom;

use super::Dataset;
use crate::augment::sample_rng;
use crate::error::{Error, Result};

const SPLIT_STREAM: u64 = 0x5_9117;
const FOLD_STREAM: u64 = 0xF_01D5;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn group_by_class(ds: &Dataset, indices: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); ds.num_classes()];
    for &i in indices {
        let s = ds
            .samples()
            .get(i)
            .ok_or_else(|| Error::invalid(format!("index {i} out of range for {} samples", ds.len())))?;
        groups[s.label].push(i);
    }
    Ok(groups)
}

fn floor_share(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Stratified split of the whole dataset.
///
/// Per class with `n` samples: `floor(r_test·n)` go to test, `floor(r_train·n)`
/// to train and the rest to validation, drawn by a seeded shuffle.
pub fn split_dataset(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Split> {
    let all: Vec<usize> = (0..ds.len()).collect();
    split_indices(ds, &all, ratios, seed)
}

/// [`split_dataset`] restricted to `indices`.
pub fn split_indices(ds: &Dataset, indices: &[usize], ratios: [f64; 3], seed: u64) -> Result<Split> {
    let [r_train, r_val, r_test] = ratios;
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (r_train + r_val + r_test - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut split = Split::default();
    for (class, mut members) in group_by_class(ds, indices)?.into_iter().enumerate() {
        let mut rng = sample_rng(seed ^ SPLIT_STREAM, class as u64);
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = floor_share(r_test, n);
        let n_train = floor_share(r_train, n).min(n - n_test);
        split.test.extend_from_slice(&members[..n_test]);
        split.train.extend_from_slice(&members[n_test..n_test + n_train]);
        split.val.extend_from_slice(&members[n_test + n_train..]);
    }
    Ok(split)
}

/// Stratified `k`-fold partition of the whole dataset.
pub fn kfold_split(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    kfold_split_indices(ds, &all, k, seed)
}

/// Stratified `k`-fold partition of `indices`. Each class is shuffled and
/// dealt round-robin into the folds, so per-class fold sizes differ by at
/// most one.
pub fn kfold_split_indices(ds: &Dataset, indices: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut vals = vec![Vec::new(); k];
    for (class, mut members) in group_by_class(ds, indices)?.into_iter().enumerate() {
        if members.len() < k {
            return Err(Error::invalid(format!(
                "class `{}` has {} samples, fewer than {k} folds",
                ds.class_names()[class],
                members.len()
            )));
        }
        let mut rng = sample_rng(seed ^ FOLD_STREAM, class as u64);
        members.shuffle(&mut rng);
        for (pos, idx) in members.into_iter().enumerate() {
            vals[pos % k].push(idx);
        }
    }
    let folds = (0..k)
        .map(|f| {
            let mut train: Vec<usize> = vals
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            train.sort_unstable();
            let mut val = vals[f].clone();
            val.sort_unstable();
            Fold { train, val }
        })
        .collect();
    Ok(folds)
}

/// Mini-batches over `indices` for one epoch, shuffled by `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    drop_last: bool,
}

impl BatchIter {
    pub fn new(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let mut order = indices.to_vec();
        order.shuffle(&mut sample_rng(seed, epoch));
        Ok(BatchIter {
            order,
            batch_size,
            pos: 0,
            drop_last: false,
        })
    }

    /// Keeps the input order instead of shuffling.
    pub fn sequential(indices: &[usize], batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(BatchIter {
            order: indices.to_vec(),
            batch_size,
            pos: 0,
            drop_last: false,
        })
    }

    pub fn drop_last(mut self, on: bool) -> Self {
        self.drop_last = on;
        self
    }

    pub fn num_batches(&self) -> usize {
        let n = self.order.len();
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let rest = self.order.len() - self.pos;
        if rest == 0 || (self.drop_last && rest < self.batch_size) {
            return None;
        }
        let end = self.pos + rest.min(self.batch_size);
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}
