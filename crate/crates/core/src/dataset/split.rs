use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CandidateDataset;
use crate::error::{Error, Result};

/// Deterministic stratified partition of `dataset` into `fractions.len()` parts.
///
/// Each class is shuffled with its own seed `seed ^ class` and cut into
/// contiguous runs whose sizes are the proportional counts rounded by largest
/// remainder, so every part's per-class count is within one of exact.
/// Records inside a part keep dataset order.
pub fn split(dataset: &CandidateDataset, fractions: &[f64], seed: u64) -> Result<Vec<CandidateDataset>> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::invalid("fractions must be non-empty and positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("fractions sum to {total}, expected 1")));
    }

    let k = dataset.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, r) in dataset.records().iter().enumerate() {
        by_class[r.label].push(i);
    }

    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for (class, mut members) in by_class.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ class as u64);
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), fractions);
        let mut start = 0;
        for (part, &n) in parts.iter_mut().zip(&counts) {
            part.extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    parts
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            dataset.subset(&idx)
        })
        .collect()
}

/// `n` split into `parts` sizes differing by at most one, larger ones first.
pub(crate) fn apportion_equal(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

/// Largest-remainder rounding of `n * fractions`; ties go to the earlier part.
pub(crate) fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in order.iter().take(n.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;
    use crate::dataset::{Image, ImageRecord};

    fn dataset(n: usize, k: usize) -> CandidateDataset {
        let records = (0..n)
            .map(|i| ImageRecord::new(format!("r{i}"), Image::filled(1, 1, 1, (i % 251) as u8), i % k))
            .collect();
        CandidateDataset::with_num_classes(records, k, 0).unwrap()
    }

    fn ids(ds: &CandidateDataset) -> Vec<String> {
        ds.records().iter().map(|r| r.id.clone()).collect()
    }

    #[test]
    fn halves_are_disjoint_and_cover() {
        let ds = dataset(100, 1);
        let parts = split(&ds, &[0.5, 0.5], 7).unwrap();
        assert_eq!(parts[0].len(), 50);
        assert_eq!(parts[1].len(), 50);
        let a: HashSet<_> = ids(&parts[0]).into_iter().collect();
        let b: HashSet<_> = ids(&parts[1]).into_iter().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.union(&b).count(), 100);
    }

    #[test]
    fn single_fraction_is_identity() {
        let ds = dataset(37, 3);
        let parts = split(&ds, &[1.0], 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], ds);
    }

    #[test]
    fn stratified_counts_per_class() {
        let ds = dataset(1000, 10);
        let parts = split(&ds, &[0.8, 0.2], 3).unwrap();
        assert_eq!(parts[0].class_counts(), vec![80; 10]);
        assert_eq!(parts[1].class_counts(), vec![20; 10]);
    }

    #[test]
    fn invalid_inputs() {
        let ds = dataset(10, 2);
        assert!(split(&ds, &[], 0).is_err());
        assert!(split(&ds, &[0.5, 0.6], 0).is_err());
        assert!(split(&ds, &[1.5, -0.5], 0).is_err());
        let empty = CandidateDataset::with_num_classes(vec![], 2, 0).unwrap();
        assert!(split(&empty, &[1.0], 0).is_err());
    }

    #[test]
    fn seeds_change_the_partition() {
        let ds = dataset(20, 2);
        let base = ids(&split(&ds, &[0.5, 0.5], 0).unwrap()[0]);
        let differing = (1..=100u64)
            .filter(|&s| ids(&split(&ds, &[0.5, 0.5], s).unwrap()[0]) != base)
            .count();
        assert!(differing >= 99, "only {differing} of 100 seeds changed the split");
    }

    proptest! {
        #[test]
        fn partition_is_exact_and_reproducible(
            n in 1usize..120,
            k in 1usize..6,
            raw in proptest::collection::vec(0.05f64..1.0, 1..5),
            seed in any::<u64>(),
        ) {
            let total: f64 = raw.iter().sum();
            let mut fractions: Vec<f64> = raw.iter().map(|f| f / total).collect();
            let head: f64 = fractions[..fractions.len() - 1].iter().sum();
            *fractions.last_mut().unwrap() = 1.0 - head;
            let ds = dataset(n, k);
            let parts = split(&ds, &fractions, seed).unwrap();
            prop_assert_eq!(&parts, &split(&ds, &fractions, seed).unwrap());

            let mut all: Vec<String> = parts.iter().flat_map(ids).collect();
            all.sort();
            let mut orig = ids(&ds);
            orig.sort();
            prop_assert_eq!(all, orig);

            let counts = ds.class_counts();
            for (part, f) in parts.iter().zip(&fractions) {
                for (c, &got) in part.class_counts().iter().enumerate() {
                    let exact = counts[c] as f64 * f;
                    prop_assert!((got as f64 - exact).abs() <= 1.0 + 1e-9);
                }
            }
        }
    }
}
