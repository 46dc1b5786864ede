use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KtError, Result};

/// Partitions `0..n` into `k` folds after a seeded shuffle. The first
/// `n % k` folds hold one extra index.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(KtError::contract(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(KtError::contract(format!("{n} students cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(folds)
}

/// Student indices for one cross-validation round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fold `fold` is the test set. Of the remaining students, a seeded
/// `val_fraction` (rounded, at least one) becomes the validation set.
pub fn fold_split(n: usize, k: usize, fold: usize, val_fraction: f64, seed: u64) -> Result<Split> {
    if fold >= k {
        return Err(KtError::contract(format!("fold {fold} out of range for {k} folds")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(KtError::contract(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let folds = kfold_split(n, k, seed)?;
    let test = folds[fold].clone();
    let mut rest: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(f, _)| f != fold)
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    let n_val = ((rest.len() as f64 * val_fraction).round() as usize).max(1);
    if n_val >= rest.len() {
        return Err(KtError::contract(format!(
            "{} training students leave none after reserving {n_val} for validation",
            rest.len()
        )));
    }
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11));
    let val = rest[..n_val].to_vec();
    let train = rest[n_val..].to_vec();
    Ok(Split { train, val, test })
}
