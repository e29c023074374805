//! Label-noise generators and the clean/noisy mixing construction.

use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateDataset, Image, ImageRecord, Source};
use crate::error::{Error, Result};
use crate::synth::distractor_pool;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    UniformFlip,
    Structured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Fraction of labels corrupted within each class.
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Number of coherent wrong-label groups (structured only).
    #[serde(default = "one")]
    pub cluster_count: usize,
    /// Fraction of each group whose pixels are replaced by distractor images.
    #[serde(default)]
    pub ood_fraction: f64,
}

fn one() -> usize {
    1
}

impl NoiseSpec {
    pub fn uniform(rate: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::UniformFlip,
            rate,
            seed,
            cluster_count: 1,
            ood_fraction: 0.0,
        }
    }

    pub fn structured(rate: f64, cluster_count: usize, ood_fraction: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Structured,
            rate,
            seed,
            cluster_count,
            ood_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid(format!("noise rate {} outside [0, 1]", self.rate)));
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) {
            return Err(Error::invalid("ood_fraction must be in [0, 1]"));
        }
        if self.kind == NoiseKind::Structured && self.cluster_count == 0 {
            return Err(Error::invalid("structured noise needs cluster_count >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub index: usize,
    pub original: usize,
    pub assigned: usize,
    pub ood: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
}

/// Every label change made by a generator.
///
/// Besides the serialisable entries it keeps what is needed to undo the
/// corruption in memory: prior clean flags and the pixels/source of records
/// whose images were replaced.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NoiseLedger {
    pub entries: Vec<LedgerEntry>,
    prior_flags: Vec<Option<bool>>,
    replaced: Vec<(usize, Image, Source, String)>,
}

impl NoiseLedger {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn flipped_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    pub fn original_labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.original).collect()
    }

    pub fn assigned_labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.assigned).collect()
    }

    /// JSONL, one `{index, original, assigned, ood, cluster?}` per line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io("ledger", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("ledger", e))?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(NoiseLedger {
            entries,
            ..NoiseLedger::default()
        })
    }

    /// Undoes the corruption recorded here, restoring labels, pixels,
    /// sources and clean flags.
    pub fn revert(&self, noisy: &CandidateDataset) -> Result<CandidateDataset> {
        let mut records = noisy.records().to_vec();
        for e in &self.entries {
            let rec = records
                .get_mut(e.index)
                .ok_or_else(|| Error::invalid(format!("ledger index {} out of range", e.index)))?;
            if rec.label != e.assigned {
                return Err(Error::invalid(format!(
                    "record {} has label {}, ledger says {}",
                    e.index, rec.label, e.assigned
                )));
            }
            rec.label = e.original;
        }
        for (i, pixels, source, keyword) in &self.replaced {
            records[*i].pixels = pixels.clone();
            records[*i].source = *source;
            records[*i].keyword = keyword.clone();
        }
        if !self.prior_flags.is_empty() {
            for (rec, flag) in records.iter_mut().zip(&self.prior_flags) {
                rec.clean_flag = *flag;
            }
        }
        noisy.derive(records)
    }
}

/// `⌊x⌉` with halves rounded up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Per class, picks exactly `⌊ρ·n_c⌉` records uniformly at random.
fn pick_corrupted(dataset: &CandidateDataset, rate: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, r) in dataset.records().iter().enumerate() {
        by_class[r.label].push(i);
    }
    by_class
        .into_iter()
        .map(|members| {
            let count = round_half_up(rate * members.len() as f64).min(members.len());
            index::sample(rng, members.len(), count)
                .into_iter()
                .map(|j| members[j])
                .collect()
        })
        .collect()
}

fn other_class(rng: &mut impl Rng, original: usize, k: usize) -> usize {
    let r = rng.random_range(0..k - 1);
    if r >= original {
        r + 1
    } else {
        r
    }
}

fn mark_flags(records: &mut [ImageRecord], corrupted: &[usize]) {
    for r in records.iter_mut() {
        r.clean_flag = Some(true);
    }
    for &i in corrupted {
        records[i].clean_flag = Some(false);
    }
}

/// Flips exactly `⌊ρ·n_c⌉` labels of every class to a uniformly random other class.
///
/// Flipped records get `clean_flag = false`, the rest `true`; `ρ = 0` returns the
/// dataset untouched.
pub fn flip_uniform(dataset: &CandidateDataset, rate: f64, seed: u64) -> Result<(CandidateDataset, NoiseLedger)> {
    NoiseSpec::uniform(rate, seed).validate()?;
    let k = dataset.num_classes();
    if rate == 0.0 {
        return Ok((dataset.clone(), NoiseLedger::default()));
    }
    if k < 2 {
        return Err(Error::invalid("label flipping needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corrupted: Vec<usize> = pick_corrupted(dataset, rate, &mut rng).concat();
    corrupted.sort_unstable();

    let mut records = dataset.records().to_vec();
    let prior_flags = records.iter().map(|r| r.clean_flag).collect();
    let mut entries = Vec::with_capacity(corrupted.len());
    for &i in &corrupted {
        let original = records[i].label;
        let assigned = other_class(&mut rng, original, k);
        records[i].label = assigned;
        entries.push(LedgerEntry {
            index: i,
            original,
            assigned,
            ood: false,
            cluster: None,
        });
    }
    mark_flags(&mut records, &corrupted);
    let ledger = NoiseLedger {
        entries,
        prior_flags,
        replaced: Vec::new(),
    };
    Ok((dataset.derive(records)?, ledger))
}

/// Coherent label noise: the `⌊ρ·n_c⌉` corrupted records per class are cut
/// (in class order) into `cluster_count` groups, every member of a group gets
/// the same wrong label, and the leading `⌊ood_fraction·|group|⌉` members of
/// each group have their pixels replaced by images from one distractor theme.
///
/// Distractor themes are the pool's classes; group `g` draws from theme
/// `g mod themes` without replacement. When no pool is given one is generated
/// with `cluster_count` themes.
pub fn make_structured(
    dataset: &CandidateDataset,
    spec: &NoiseSpec,
    pool: Option<&CandidateDataset>,
) -> Result<(CandidateDataset, NoiseLedger)> {
    spec.validate()?;
    if spec.kind != NoiseKind::Structured {
        return Err(Error::invalid("make_structured needs a structured noise spec"));
    }
    if spec.rate == 0.0 {
        return Ok((dataset.clone(), NoiseLedger::default()));
    }
    let k = dataset.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let corrupted: Vec<usize> = pick_corrupted(dataset, spec.rate, &mut rng).concat();
    if corrupted.is_empty() {
        return Ok((dataset.clone(), NoiseLedger::default()));
    }
    if spec.cluster_count > corrupted.len() {
        return Err(Error::invalid(format!(
            "cluster_count {} exceeds the {} corrupted records",
            spec.cluster_count,
            corrupted.len()
        )));
    }
    let sizes = crate::dataset::apportion_equal(corrupted.len(), spec.cluster_count);
    let mut groups = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for n in sizes {
        groups.push(&corrupted[start..start + n]);
        start += n;
    }

    let ood_counts: Vec<usize> = groups
        .iter()
        .map(|g| round_half_up(spec.ood_fraction * g.len() as f64))
        .collect();
    let generated;
    let pool = match pool {
        _ if ood_counts.iter().all(|&c| c == 0) => None,
        Some(p) => Some(p),
        None => {
            let shape = dataset.image_shape().expect("non-empty dataset");
            let per_theme = ood_counts.iter().copied().max().unwrap_or(0);
            generated = distractor_pool(spec.cluster_count, per_theme, shape, spec.seed ^ 0x9e37_79b9_7f4a_7c15)?;
            Some(&generated)
        }
    };
    let mut themes: Vec<Vec<usize>> = Vec::new();
    if let Some(pool) = pool {
        if pool.image_shape() != dataset.image_shape() {
            return Err(Error::mismatch(
                "distractor image shape",
                format!("{:?}", dataset.image_shape()),
                format!("{:?}", pool.image_shape()),
            ));
        }
        themes = vec![Vec::new(); pool.num_classes()];
        for (i, r) in pool.records().iter().enumerate() {
            themes[r.label].push(i);
        }
        for t in &mut themes {
            t.shuffle(&mut rng);
        }
    }

    let mut records = dataset.records().to_vec();
    let prior_flags = records.iter().map(|r| r.clean_flag).collect();
    let mut entries = Vec::with_capacity(corrupted.len());
    let mut replaced = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        let mut present = vec![false; k];
        for &i in members.iter() {
            present[records[i].label] = true;
        }
        let candidates: Vec<usize> = (0..k).filter(|&c| !present[c]).collect();
        if candidates.is_empty() {
            return Err(Error::invalid(format!(
                "group {g} spans every class; no common wrong label exists"
            )));
        }
        let target = candidates[rng.random_range(0..candidates.len())];
        for (slot, &i) in members.iter().enumerate() {
            let ood = slot < ood_counts[g];
            if ood {
                let pool = pool.expect("pool exists when ood records are requested");
                let theme_count = themes.len();
                let theme = &mut themes[g % theme_count];
                let src = theme.pop().ok_or_else(|| {
                    Error::invalid(format!("distractor pool too small for group {g}"))
                })?;
                let rec = &mut records[i];
                replaced.push((i, rec.pixels.clone(), rec.source, rec.keyword.clone()));
                rec.pixels = pool.records()[src].pixels.clone();
                rec.source = Source::Synthetic;
                rec.keyword = pool.records()[src].keyword.clone();
            }
            entries.push(LedgerEntry {
                index: i,
                original: records[i].label,
                assigned: target,
                ood,
                cluster: Some(g),
            });
            records[i].label = target;
        }
    }
    entries.sort_by_key(|e| e.index);
    replaced.sort_by_key(|r| r.0);
    mark_flags(&mut records, &corrupted);
    let ledger = NoiseLedger {
        entries,
        prior_flags,
        replaced,
    };
    Ok((dataset.derive(records)?, ledger))
}

/// Replaces `⌊f·|clean|⌉` uniformly chosen clean records with `r` times as many
/// noisy ones, drawn per removed class where the noisy set has enough records of
/// that class and uniformly from the remainder otherwise.
///
/// Output: surviving clean records in their order, then the drawn noisy records
/// in noisy-set order.
pub fn mix(
    clean: &CandidateDataset,
    noisy: &CandidateDataset,
    fraction: f64,
    ratio: usize,
    seed: u64,
) -> Result<CandidateDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("mixing fraction must be in [0, 1]"));
    }
    if ratio == 0 {
        return Err(Error::invalid("mixing ratio must be at least 1"));
    }
    if clean.num_classes() != noisy.num_classes() {
        return Err(Error::mismatch("class count", clean.num_classes(), noisy.num_classes()));
    }
    let removed_n = round_half_up(fraction * clean.len() as f64).min(clean.len());
    let wanted = removed_n * ratio;
    if noisy.len() < wanted {
        return Err(Error::invalid(format!(
            "mixing needs {wanted} noisy records, only {} available",
            noisy.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let removed: Vec<usize> = index::sample(&mut rng, clean.len(), removed_n).into_vec();
    let mut is_removed = vec![false; clean.len()];
    let mut removed_per_class = vec![0usize; clean.num_classes()];
    for &i in &removed {
        is_removed[i] = true;
        removed_per_class[clean.records()[i].label] += 1;
    }

    let mut noisy_by_class: Vec<Vec<usize>> = vec![Vec::new(); noisy.num_classes()];
    for (i, r) in noisy.records().iter().enumerate() {
        noisy_by_class[r.label].push(i);
    }
    let mut taken = vec![false; noisy.len()];
    let mut shortfall = 0;
    for (class, members) in noisy_by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let need = removed_per_class[class] * ratio;
        let got = need.min(members.len());
        for &i in &members[..got] {
            taken[i] = true;
        }
        shortfall += need - got;
    }
    if shortfall > 0 {
        let mut rest: Vec<usize> = (0..noisy.len()).filter(|&i| !taken[i]).collect();
        rest.shuffle(&mut rng);
        for &i in &rest[..shortfall] {
            taken[i] = true;
        }
    }

    let mut records: Vec<ImageRecord> = clean
        .records()
        .iter()
        .zip(&is_removed)
        .filter(|(_, &gone)| !gone)
        .map(|(r, _)| r.clone())
        .collect();
    records.extend(
        noisy
            .records()
            .iter()
            .zip(&taken)
            .filter(|(_, &t)| t)
            .map(|(r, _)| r.clone()),
    );
    clean.derive(records)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;
    use crate::dataset::clean_subset_indices;
    use crate::synth::{ClassPrototypes, PrototypeSpec};

    fn balanced(per_class: usize, k: usize, prefix: &str) -> CandidateDataset {
        let records = (0..per_class * k)
            .map(|i| ImageRecord::new(format!("{prefix}{i}"), Image::filled(2, 2, 1, (i % 256) as u8), i % k))
            .collect();
        CandidateDataset::with_num_classes(records, k, 0).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let ds = balanced(10, 3, "r");
        let (out, ledger) = flip_uniform(&ds, 0.0, 1).unwrap();
        assert_eq!(out, ds);
        assert!(ledger.is_empty());
        let (out, ledger) = make_structured(&ds, &NoiseSpec::structured(0.0, 2, 1.0, 1), None).unwrap();
        assert_eq!(out, ds);
        assert!(ledger.is_empty());
    }

    #[test]
    fn exact_counts_at_45_percent() {
        let ds = balanced(1000, 10, "r");
        let (noisy, ledger) = flip_uniform(&ds, 0.45, 3).unwrap();
        let mut per_class = vec![0; 10];
        for e in &ledger.entries {
            assert_ne!(e.original, e.assigned);
            per_class[e.original] += 1;
        }
        assert_eq!(per_class, vec![450; 10]);
        assert_eq!(clean_subset_indices(&noisy).len(), 10_000 - ledger.len());
        for c in 0..10 {
            let retained = noisy
                .records()
                .iter()
                .zip(ds.records())
                .filter(|(n, o)| o.label == c && n.label == c)
                .count();
            assert_eq!(retained, 550);
        }
    }

    #[test]
    fn full_rate_two_classes_toggles() {
        let ds = balanced(7, 2, "r");
        let (noisy, ledger) = flip_uniform(&ds, 1.0, 0).unwrap();
        assert_eq!(ledger.len(), 14);
        for (n, o) in noisy.records().iter().zip(ds.records()) {
            assert_eq!(n.label, 1 - o.label);
            assert_eq!(n.clean_flag, Some(false));
        }
    }

    #[test]
    fn single_class_cannot_flip() {
        assert!(flip_uniform(&balanced(3, 1, "r"), 0.5, 0).is_err());
        assert!(flip_uniform(&balanced(3, 2, "r"), 1.5, 0).is_err());
    }

    #[test]
    fn structured_groups_share_one_wrong_ood_label() {
        let protos = ClassPrototypes::new(
            PrototypeSpec {
                height: 6,
                width: 6,
                ..PrototypeSpec::default()
            },
            1,
        )
        .unwrap();
        let ds = protos.sample(20, "s", Source::Clean, 2).unwrap();
        let spec = NoiseSpec::structured(0.45, 5, 1.0, 4);
        let (noisy, ledger) = make_structured(&ds, &spec, None).unwrap();
        assert_eq!(ledger.len(), 90);
        let mut groups: HashMap<usize, Vec<&LedgerEntry>> = HashMap::new();
        for e in &ledger.entries {
            groups.entry(e.cluster.unwrap()).or_default().push(e);
        }
        assert_eq!(groups.len(), 5);
        for members in groups.values() {
            let target = members[0].assigned;
            assert!(members.iter().all(|e| e.assigned == target && e.ood && e.original != target));
            for e in members {
                assert_eq!(noisy.records()[e.index].label, target);
                assert_eq!(noisy.records()[e.index].source, Source::Synthetic);
                assert_ne!(noisy.records()[e.index].pixels, ds.records()[e.index].pixels);
            }
        }
        assert_eq!(ledger.revert(&noisy).unwrap(), ds);
    }

    #[test]
    fn structured_errors() {
        let ds = balanced(2, 3, "r");
        // 3 corrupted records cannot form 4 groups.
        assert!(make_structured(&ds, &NoiseSpec::structured(0.5, 4, 0.0, 0), None).is_err());
        let small_pool = crate::synth::distractor_pool(1, 1, (2, 2, 1), 0).unwrap();
        assert!(make_structured(&ds, &NoiseSpec::structured(0.5, 1, 1.0, 0), Some(&small_pool)).is_err());
        assert!(make_structured(&ds, &NoiseSpec::uniform(0.5, 0), None).is_err());
    }

    #[test]
    fn ledger_jsonl() {
        let ds = balanced(5, 3, "r");
        let (_, ledger) = flip_uniform(&ds, 0.4, 8).unwrap();
        let mut buf = Vec::new();
        ledger.write_jsonl(&mut buf).unwrap();
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap().to_string();
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        for key in ["index", "original", "assigned", "ood"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back = NoiseLedger::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back.entries, ledger.entries);
    }

    #[test]
    fn mix_sizes() {
        let clean = balanced(100, 4, "c");
        let noisy = balanced(400, 4, "n");
        let out = mix(&clean, &noisy, 0.5, 3, 1).unwrap();
        assert_eq!(out.len(), 200 + 600);
        let from_clean = out.records().iter().filter(|r| r.id.starts_with('c')).count();
        assert_eq!(from_clean, 200);
        // Stratified: each removed record is replaced by three of its class.
        let mut removed = vec![0usize; 4];
        for r in clean.records() {
            if out.position(&r.id).is_none() {
                removed[r.label] += 1;
            }
        }
        let expected: Vec<usize> = removed.iter().map(|&d| 100 + 2 * d).collect();
        assert_eq!(out.class_counts(), expected);

        assert_eq!(mix(&clean, &noisy, 0.0, 10, 1).unwrap(), clean);
        let all = mix(&clean, &noisy, 1.0, 1, 1).unwrap();
        assert_eq!(all.len(), clean.len());
        assert!(all.records().iter().all(|r| r.id.starts_with('n')));
        assert!(mix(&clean, &balanced(10, 4, "n"), 0.5, 1, 1).is_err());
    }

    #[test]
    fn mix_full_scale_counts() {
        let clean = balanced(5000, 10, "c");
        let noisy = balanced(7500, 10, "n");
        let out = mix(&clean, &noisy, 0.5, 3, 2).unwrap();
        let from_clean = out.records().iter().filter(|r| r.id.starts_with('c')).count();
        assert_eq!(from_clean, 25_000);
        assert_eq!(out.len() - from_clean, 75_000);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn flip_invariants(per_class in 1usize..30, k in 2usize..6, rate in 0.0f64..=1.0, seed in any::<u64>()) {
            let ds = balanced(per_class, k, "r");
            let (noisy, ledger) = flip_uniform(&ds, rate, seed).unwrap();
            prop_assert_eq!(&flip_uniform(&ds, rate, seed).unwrap().0, &noisy);
            let expected = round_half_up(rate * per_class as f64).min(per_class);
            let mut counts = vec![0; k];
            for e in &ledger.entries {
                prop_assert_ne!(e.original, e.assigned);
                counts[e.original] += 1;
            }
            if rate > 0.0 {
                prop_assert!(counts.iter().all(|&c| c == expected));
            }
            prop_assert_eq!(ledger.revert(&noisy).unwrap(), ds);
        }

        #[test]
        fn mix_size_law(n in 1usize..60, f in 0.0f64..=1.0, r in 1usize..4, seed in any::<u64>()) {
            let clean = balanced(n, 3, "c");
            let noisy = balanced(4 * n, 3, "n");
            let out = mix(&clean, &noisy, f, r, seed).unwrap();
            let removed = round_half_up(f * clean.len() as f64);
            prop_assert_eq!(out.len(), clean.len() - removed + r * removed);
            prop_assert_eq!(&mix(&clean, &noisy, f, r, seed).unwrap(), &out);
        }
    }
}
