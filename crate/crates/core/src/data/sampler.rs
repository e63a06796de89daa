use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::PairDataset;
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, stream};

/// One batch slot: which dataset of the list, and which record in it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSlot {
    pub source: usize,
    pub record: usize,
}

/// Mixture weights: `mix` if given, else proportional to dataset size.
pub fn mix_weights(datasets: &[&PairDataset], mix: &[f64]) -> Vec<f64> {
    if mix.is_empty() {
        datasets.iter().map(|d| d.len() as f64).collect()
    } else {
        mix.to_vec()
    }
}

/// Draws a batch: each slot picks a dataset by weight, then a uniform record.
///
/// The draw is a pure function of `(seed, step)`. With `distinct`, a record
/// already drawn for this batch is redrawn while its dataset has unused ones.
pub fn sample_joint(
    datasets: &[&PairDataset],
    weights: &[f64],
    batch: usize,
    seed: u64,
    step: u64,
    distinct: bool,
) -> Result<Vec<BatchSlot>> {
    if datasets.is_empty() || batch == 0 {
        return Err(Error::Invalid("need at least one dataset and a positive batch size".into()));
    }
    if weights.len() != datasets.len() {
        return Err(Error::Invalid(format!(
            "{} mixture weights for {} datasets",
            weights.len(),
            datasets.len()
        )));
    }
    for (d, &w) in datasets.iter().zip(weights) {
        if w > 0.0 && d.is_empty() {
            return Err(Error::Invalid(format!("dataset {} is empty", d.id)));
        }
    }
    let pick = WeightedIndex::new(weights).map_err(|e| Error::Invalid(format!("mixture weights: {e}")))?;
    let mut rng = keyed_rng(&[seed, stream::BATCH, step]);
    let mut used: Vec<HashSet<usize>> = vec![HashSet::new(); datasets.len()];
    Ok((0..batch)
        .map(|_| {
            let source = pick.sample(&mut rng);
            let n = datasets[source].len();
            let mut record = rng.random_range(0..n);
            if distinct && used[source].len() < n {
                while used[source].contains(&record) {
                    record = rng.random_range(0..n);
                }
                used[source].insert(record);
            }
            BatchSlot { source, record }
        })
        .collect())
}
