use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MultimodalDataset;
use crate::error::{Error, Result};

/// Index sets of one cross-validation fold. Each list is sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn stratified_splits(
    ds: &MultimodalDataset,
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    stratified_splits_for_labels(&ds.labels, ds.n_classes(), k, val_fraction, seed)
}

/// Stratified k-fold partition with a stratified validation hold-out carved
/// from each fold's training part.
///
/// Class members are shuffled and dealt round-robin over the folds, the
/// dealing position carrying over from one class to the next, so every fold
/// receives `floor(n_c / k)` or `ceil(n_c / k)` members of class `c`.
pub fn stratified_splits_for_labels(
    labels: &[usize],
    n_classes: usize,
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("fold count must be at least 2, got {k}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} out of range")))?
            .push(i);
    }
    if labels.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot fill {k} folds",
            labels.len()
        )));
    }

    let mut fold_of = vec![0usize; labels.len()];
    let mut cursor = 0usize;
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold_of[i] = cursor % k;
            cursor += 1;
        }
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        let mut pool: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for i in (0..labels.len()).filter(|&i| fold_of[i] != f) {
            pool[labels[i]].push(i);
        }
        let pool_size: usize = pool.iter().map(Vec::len).sum();
        let quotas = largest_remainder(
            &pool.iter().map(Vec::len).collect::<Vec<_>>(),
            (pool_size as f64 * val_fraction).round() as usize,
        );
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (members, q) in pool.iter_mut().zip(quotas) {
            members.shuffle(&mut rng);
            val.extend_from_slice(&members[..q]);
            train.extend_from_slice(&members[q..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        folds.push(FoldSplit { train, val, test });
    }
    Ok(folds)
}

/// Splits `total` over groups proportionally to `sizes`, handing leftover
/// units to the largest fractional parts (lowest index on ties).
fn largest_remainder(sizes: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / sum as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total.saturating_sub(quota.iter().sum());
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &g in order.iter().cycle().take(sizes.len() * 2) {
        if left == 0 {
            break;
        }
        if quota[g] < sizes[g] {
            quota[g] += 1;
            left -= 1;
        }
    }
    quota
}
