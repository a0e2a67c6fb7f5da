//! K-fold splitting: each fold holds out one chunk, halved into validation
//! and test, and trains on the rest.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::CasePair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded partition of `0..n` into `folds` chunks of near-equal size.
pub fn chunks(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Config("folds must be at least 2".into()));
    }
    if n < folds {
        return Err(Error::Validation(format!("{n} units cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..folds).map(|f| order[f * n / folds..(f + 1) * n / folds].to_vec()).collect())
}

/// Split of unit indices for one fold.
pub fn split(n: usize, folds: usize, fold: usize, seed: u64) -> Result<FoldSplit> {
    if fold >= folds {
        return Err(Error::Config(format!("fold {fold} outside 0..{folds}")));
    }
    let parts = chunks(n, folds, seed)?;
    let held = &parts[fold];
    let half = held.len() / 2;
    let mut train: Vec<usize> = parts.iter().enumerate().filter(|(i, _)| *i != fold).flat_map(|(_, c)| c.clone()).collect();
    train.sort_unstable();
    let mut validation = held[..half].to_vec();
    let mut test = held[half..].to_vec();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(FoldSplit { train, validation, test })
}

/// Pair indices grouped by query id, so all pairs of one query land in the same part.
pub fn group_pairs_by_query(pairs: &[CasePair]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(&p.query_id).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Expand a split over groups into a split over members.
pub fn expand(split: &FoldSplit, groups: &[Vec<usize>]) -> FoldSplit {
    let flat = |ix: &[usize]| {
        let mut v: Vec<usize> = ix.iter().flat_map(|&g| groups[g].iter().copied()).collect();
        v.sort_unstable();
        v
    };
    FoldSplit { train: flat(&split.train), validation: flat(&split.validation), test: flat(&split.test) }
}
