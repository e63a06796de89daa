use std::collections::BTreeMap;

use rand::seq::index::sample;

use super::PairDataset;
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, stream};

/// Subset sizes of the reference scaling ladder.
pub const PAPER_LADDER: [u64; 4] = [1_000_000, 10_000_000, 110_000_000, 334_000_000];

/// The ladder multiplied by `scale` and rounded, e.g. `1e-4` gives 100, 1000, 11000, 33400.
pub fn desk_ladder(scale: f64) -> Vec<usize> {
    PAPER_LADDER
        .iter()
        .map(|&n| (n as f64 * scale).round() as usize)
        .collect()
}

/// Largest-remainder quotas: category `c` with `n_c` of `total` records gets
/// `floor(size·n_c/total)`, and the leftover units go to the largest
/// fractional parts, ties to the smaller category id.
pub fn stratified_counts(counts: &[(u32, usize)], size: usize) -> Result<Vec<(u32, usize)>> {
    let total: usize = counts.iter().map(|c| c.1).sum();
    if size > total {
        return Err(Error::Invalid(format!("subset of {size} requested from {total} records")));
    }
    if total == 0 {
        return Ok(counts.iter().map(|&(c, _)| (c, 0)).collect());
    }
    let mut quotas: Vec<(u32, usize, u128)> = counts
        .iter()
        .map(|&(c, n)| {
            let num = size as u128 * n as u128;
            (c, (num / total as u128) as usize, num % total as u128)
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.cmp(&quotas[a].2).then(quotas[a].0.cmp(&quotas[b].0)));
    for &i in order.iter().take(size - assigned) {
        quotas[i].1 += 1;
    }
    Ok(quotas.into_iter().map(|(c, q, _)| (c, q)).collect())
}

/// Category-proportional subset, uniform within each category, in original order.
pub fn stratified_split(ds: &PairDataset, size: usize, seed: u64) -> Result<PairDataset> {
    let mut by_cat: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        by_cat.entry(r.category).or_default().push(i);
    }
    let counts: Vec<(u32, usize)> = by_cat.iter().map(|(c, v)| (*c, v.len())).collect();
    let quotas = stratified_counts(&counts, size)?;
    let mut chosen = Vec::with_capacity(size);
    for (c, q) in quotas {
        let members = &by_cat[&c];
        let mut rng = keyed_rng(&[seed, stream::SPLIT, c as u64]);
        chosen.extend(sample(&mut rng, members.len(), q).into_iter().map(|j| members[j]));
    }
    chosen.sort_unstable();
    Ok(PairDataset {
        id: ds.id.clone(),
        records: chosen.into_iter().map(|i| ds.records[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_proportions() {
        let q = stratified_counts(&[(0, 50), (1, 30), (2, 20)], 10).unwrap();
        assert_eq!(q, vec![(0, 5), (1, 3), (2, 2)]);
    }

    #[test]
    fn remainder_ties_go_to_smaller_id() {
        let q = stratified_counts(&[(0, 1), (1, 1), (2, 1)], 2).unwrap();
        assert_eq!(q, vec![(0, 1), (1, 1), (2, 0)]);
    }

    #[test]
    fn oversize_rejected() {
        assert!(stratified_counts(&[(0, 3)], 4).is_err());
    }

    #[test]
    fn ladder() {
        assert_eq!(desk_ladder(1e-4), vec![100, 1000, 11000, 33400]);
    }
}
