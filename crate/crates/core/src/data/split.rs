use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Fraction of the pool that goes to the training side.
    pub ratio: f64,
    pub seed: u64,
    #[serde(default = "default_stratified")]
    pub stratified: bool,
}

fn default_stratified() -> bool {
    true
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            seed: 0,
            stratified: true,
        }
    }
}

/// Index sets `(train, val)` of a seeded split, each ascending.
///
/// Stratified: every class contributes `floor(ratio · n_c)` training images;
/// the remaining `round(ratio · N) − Σ floor` slots go one each to classes
/// drawn by a seeded shuffle among those with a fractional share.
pub fn split_indices(labels: &[usize], class_count: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.ratio > 0.0 && spec.ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must be in (0, 1), got {}",
            spec.ratio
        )));
    }
    let n = labels.len();
    let target = (spec.ratio * n as f64).round() as usize;
    let mut train = Vec::with_capacity(target);
    if spec.stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut quota: Vec<usize> = by_class
            .iter()
            .map(|c| (spec.ratio * c.len() as f64 + 1e-9).floor() as usize)
            .collect();
        let mut candidates: Vec<usize> = (0..class_count).filter(|&c| quota[c] < by_class[c].len()).collect();
        candidates.shuffle(&mut rng_from(spec.seed, &[stream::SPLIT, u64::MAX]));
        let extra = target.saturating_sub(quota.iter().sum());
        for &c in candidates.iter().take(extra) {
            quota[c] += 1;
        }
        for (c, members) in by_class.iter_mut().enumerate() {
            members.shuffle(&mut rng_from(spec.seed, &[stream::SPLIT, c as u64]));
            train.extend_from_slice(&members[..quota[c]]);
        }
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng_from(spec.seed, &[stream::SPLIT]));
        train.extend_from_slice(&all[..target]);
    }
    train.sort_unstable();
    let mut in_train = vec![false; n];
    for &i in &train {
        in_train[i] = true;
    }
    let val: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input(format!(
            "split of {n} images at ratio {} leaves an empty side",
            spec.ratio
        )));
    }
    Ok((train, val))
}

/// Splits a training pool into disjoint, exhaustive train and validation sets.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(&dataset.labels, dataset.class_count, spec)?;
    Ok((
        dataset.subset(&train).with_split(SplitTag::Train),
        dataset.subset(&val).with_split(SplitTag::Val),
    ))
}
