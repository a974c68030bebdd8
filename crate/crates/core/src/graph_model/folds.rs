use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Assignment of every slide to one of `fold_count` cross-validation folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_count: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    /// Slide ids in fold `f`, in sorted order.
    pub fn fold_members(&self, f: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, &a)| a == f).map(|(s, _)| s.as_str()).collect()
    }
}

/// Stratified fold index per item. Each class is shuffled and dealt
/// round-robin; the negatives continue where the positives stopped so fold
/// sizes differ by at most one.
pub fn stratified_assign(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Infeasible(format!("need at least 2 folds, got {k}")));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.len() < k || neg.len() < k {
        return Err(Error::Infeasible(format!(
            "{k} folds need at least {k} slides per class, have {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let mut r = rng::stream(seed, 0xF01D);
    pos.shuffle(&mut r);
    neg.shuffle(&mut r);
    let mut out = vec![0; labels.len()];
    for (slot, &i) in pos.iter().chain(&neg).enumerate() {
        out[i] = slot % k;
    }
    Ok(out)
}

/// Stratified `k`-fold split of a labeled dataset; deterministic per seed.
pub fn stratified_folds(ds: &Dataset, k: usize, seed: u64) -> Result<FoldSplit> {
    let labels = ds.labels()?;
    let folds = stratified_assign(&labels, k, seed)?;
    Ok(FoldSplit { fold_count: k, assignments: ds.graphs.iter().zip(folds).map(|(g, f)| (g.slide_id.clone(), f)).collect() })
}

/// Splits indices into `(kept, held_out)` with roughly `fraction` of each
/// class held out. With a positive fraction each class keeps at least one
/// item on each side, so both sides contain both classes.
pub fn stratified_holdout(labels: &[bool], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction {fraction} not in [0, 1)")));
    }
    let mut r = rng::stream(seed, 0x4A11);
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut r);
        let n_hold = if fraction == 0.0 {
            0
        } else {
            if idx.len() < 2 {
                return Err(Error::Infeasible(format!(
                    "validation split needs at least 2 slides per class, class {} has {}",
                    u8::from(class),
                    idx.len()
                )));
            }
            ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1)
        };
        held.extend_from_slice(&idx[..n_hold]);
        kept.extend_from_slice(&idx[n_hold..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    Ok((kept, held))
}
