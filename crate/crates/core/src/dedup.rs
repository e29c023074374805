//! Near-duplicate search between a test set and a training set, plus the
//! bookkeeping that turns review verdicts into a cleaned training set.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateDataset, Image};
use crate::error::{Error, Result};

pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
/// Pairs at or below this distance count as exact copies.
pub const EXACT_L2: f64 = 1e-6;
/// Pairs at or above this SSIM count as exact copies.
pub const EXACT_SSIM: f64 = 1.0 - 1e-9;
pub const AUTO_REVIEWER: &str = "auto-flag";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub pair_id: String,
    pub test_id: String,
    pub train_id: String,
    pub l2_distance: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_l2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_ssim: Option<usize>,
}

impl SimilarityPair {
    pub fn min_rank(&self) -> usize {
        match (self.rank_l2, self.rank_ssim) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => usize::MAX,
        }
    }

    pub fn is_exact_copy(&self) -> bool {
        self.l2_distance <= EXACT_L2 || self.ssim >= EXACT_SSIM
    }
}

pub fn pair_id(test_id: &str, train_id: &str) -> String {
    format!("{test_id}|{train_id}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Similar,
    Distinct,
}

impl std::str::FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similar" => Ok(Verdict::Similar),
            "distinct" => Ok(Verdict::Distinct),
            other => Err(Error::invalid(format!("verdict must be similar or distinct, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub pair_id: String,
    pub verdict: Verdict,
    pub reviewer: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub train_id: String,
    pub pair_id: String,
    pub verdict_source: String,
}

/// Global (single window) SSIM on luma with population moments.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch("ssim image shape", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let la = LumaStats::new(a);
    let lb = LumaStats::new(b);
    Ok(la.ssim(&lb))
}

/// Euclidean distance between raw 0–255 intensities.
pub fn l2_distance(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch("l2 image shape", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok((squared_l2(a.as_bytes(), b.as_bytes()) as f64).sqrt())
}

// Integer accumulation keeps distance ordering exact.
fn squared_l2(a: &[u8], b: &[u8]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i32 - y as i32;
            (d * d) as u64
        })
        .sum()
}

struct LumaStats {
    centered: Vec<f64>,
    mean: f64,
    var: f64,
}

impl LumaStats {
    fn new(img: &Image) -> Self {
        let luma = img.luma();
        let n = luma.len() as f64;
        let mean = luma.iter().sum::<f64>() / n;
        let centered: Vec<f64> = luma.iter().map(|v| v - mean).collect();
        let var = centered.iter().map(|d| d * d).sum::<f64>() / n;
        LumaStats { centered, mean, var }
    }

    fn ssim(&self, other: &LumaStats) -> f64 {
        let n = self.centered.len() as f64;
        let cov = self.centered.iter().zip(&other.centered).map(|(a, b)| a * b).sum::<f64>() / n;
        let num = (2.0 * self.mean * other.mean + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (self.mean * self.mean + other.mean * other.mean + SSIM_C1) * (self.var + other.var + SSIM_C2);
        num / den
    }
}

/// Exact `k`-nearest-neighbour search under both metrics.
///
/// For every test image the `k` closest train images by distance (ties go to
/// the earlier train record) and the `k` most similar by SSIM are merged into
/// one list; each pair carries both metric values and the rank under each
/// metric that selected it. Output is ordered by test id, then by the smaller
/// rank, then `rank_l2`, then train order. A `k` above the training set size
/// is clamped.
pub fn scan(test: &CandidateDataset, train: &CandidateDataset, k: usize) -> Result<Vec<SimilarityPair>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if test.is_empty() || train.is_empty() {
        return Ok(Vec::new());
    }
    if test.image_shape() != train.image_shape() {
        return Err(Error::mismatch(
            "dedup image shape",
            format!("{:?}", train.image_shape()),
            format!("{:?}", test.image_shape()),
        ));
    }
    let k = if k > train.len() {
        log::warn!("k = {k} exceeds the {} training images; using {}", train.len(), train.len());
        train.len()
    } else {
        k
    };
    let train_stats: Vec<LumaStats> = train.records().par_iter().map(|r| LumaStats::new(&r.pixels)).collect();

    let mut per_test: Vec<(usize, Vec<SimilarityPair>)> = test
        .records()
        .par_iter()
        .enumerate()
        .map(|(ti, rec)| {
            let bytes = rec.pixels.as_bytes();
            let stats = LumaStats::new(&rec.pixels);
            let sq: Vec<u64> = train.records().iter().map(|t| squared_l2(bytes, t.pixels.as_bytes())).collect();
            let sims: Vec<f64> = train_stats.iter().map(|t| stats.ssim(t)).collect();

            let by_l2 = top_k(train.len(), k, |a, b| sq[a].cmp(&sq[b]));
            let by_ssim = top_k(train.len(), k, |a, b| sims[b].total_cmp(&sims[a]));

            let mut ranks: HashMap<usize, (Option<usize>, Option<usize>)> = HashMap::with_capacity(2 * k);
            for (r, &j) in by_l2.iter().enumerate() {
                ranks.entry(j).or_default().0 = Some(r + 1);
            }
            for (r, &j) in by_ssim.iter().enumerate() {
                ranks.entry(j).or_default().1 = Some(r + 1);
            }
            let mut rows: Vec<(usize, SimilarityPair)> = ranks
                .into_iter()
                .map(|(j, (rank_l2, rank_ssim))| {
                    let train_id = &train.records()[j].id;
                    (
                        j,
                        SimilarityPair {
                            pair_id: pair_id(&rec.id, train_id),
                            test_id: rec.id.clone(),
                            train_id: train_id.clone(),
                            l2_distance: (sq[j] as f64).sqrt(),
                            ssim: sims[j],
                            rank_l2,
                            rank_ssim,
                        },
                    )
                })
                .collect();
            rows.sort_by(|(ja, a), (jb, b)| {
                a.min_rank()
                    .cmp(&b.min_rank())
                    .then(a.rank_l2.unwrap_or(usize::MAX).cmp(&b.rank_l2.unwrap_or(usize::MAX)))
                    .then(ja.cmp(jb))
            });
            (ti, rows.into_iter().map(|(_, p)| p).collect())
        })
        .collect();
    per_test.sort_by(|(ia, a), (ib, b)| {
        let ka = a.first().map(|p| p.test_id.as_str()).unwrap_or("");
        let kb = b.first().map(|p| p.test_id.as_str()).unwrap_or("");
        ka.cmp(kb).then(ia.cmp(ib))
    });
    Ok(per_test.into_iter().flat_map(|(_, rows)| rows).collect())
}

fn top_k(n: usize, k: usize, cmp: impl Fn(usize, usize) -> Ordering) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let order = |a: &usize, b: &usize| cmp(*a, *b).then(a.cmp(b));
    if k < n {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx
}

/// Ids of pairs that are exact copies under either metric.
pub fn auto_flag(pairs: &[SimilarityPair]) -> Vec<String> {
    pairs.iter().filter(|p| p.is_exact_copy()).map(|p| p.pair_id.clone()).collect()
}

/// `similar` decisions for every auto-flagged pair.
pub fn auto_decisions(pairs: &[SimilarityPair], timestamp: i64) -> Vec<ReviewDecision> {
    auto_flag(pairs)
        .into_iter()
        .map(|pair_id| ReviewDecision {
            pair_id,
            verdict: Verdict::Similar,
            reviewer: AUTO_REVIEWER.to_string(),
            timestamp,
        })
        .collect()
}

/// Latest decision per pair (greatest timestamp, later file position on ties).
pub fn latest_decisions<'a>(
    pairs: &[SimilarityPair],
    decisions: &'a [ReviewDecision],
) -> Result<HashMap<&'a str, &'a ReviewDecision>> {
    let known: HashSet<&str> = pairs.iter().map(|p| p.pair_id.as_str()).collect();
    let mut latest: HashMap<&str, &ReviewDecision> = HashMap::new();
    for d in decisions {
        if !known.contains(d.pair_id.as_str()) {
            return Err(Error::UnknownPair(d.pair_id.clone()));
        }
        match latest.get(d.pair_id.as_str()) {
            Some(prev) if prev.timestamp > d.timestamp => {}
            Some(prev) => {
                if prev.timestamp == d.timestamp && prev.verdict != d.verdict {
                    log::warn!(
                        "pair {} has contradictory verdicts at timestamp {}; keeping the later line ({:?})",
                        d.pair_id,
                        d.timestamp,
                        d.verdict
                    );
                }
                latest.insert(&d.pair_id, d);
            }
            None => {
                latest.insert(&d.pair_id, d);
            }
        }
    }
    Ok(latest)
}

/// Removes every train record named by a pair whose latest verdict is
/// `similar`. Record order is preserved; train ids already absent are skipped,
/// so applying the same decisions again changes nothing.
pub fn apply_decisions(
    train: &CandidateDataset,
    pairs: &[SimilarityPair],
    decisions: &[ReviewDecision],
) -> Result<(CandidateDataset, Vec<Removal>)> {
    let latest = latest_decisions(pairs, decisions)?;
    let mut deciding: HashMap<&str, Removal> = HashMap::new();
    for p in pairs {
        if let Some(d) = latest.get(p.pair_id.as_str()) {
            if d.verdict == Verdict::Similar && !deciding.contains_key(p.train_id.as_str()) {
                deciding.insert(
                    &p.train_id,
                    Removal {
                        train_id: p.train_id.clone(),
                        pair_id: p.pair_id.clone(),
                        verdict_source: d.reviewer.clone(),
                    },
                );
            }
        }
    }
    let mut kept = Vec::with_capacity(train.len());
    let mut removals = Vec::new();
    for rec in train.records() {
        match deciding.remove(rec.id.as_str()) {
            Some(r) => removals.push(r),
            None => kept.push(rec.clone()),
        }
    }
    Ok((train.derive(kept)?, removals))
}

/// First line of a pairs file: how the metrics were computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairsHeader {
    pub kind: String,
    pub k: usize,
    pub l2: String,
    pub ssim_window: String,
    pub luma_weights: [f64; 3],
    pub c1: f64,
    pub c2: f64,
}

impl PairsHeader {
    pub const KIND: &'static str = "similarity_pairs";

    pub fn new(k: usize) -> Self {
        PairsHeader {
            kind: Self::KIND.to_string(),
            k,
            l2: "euclidean over raw 0-255 intensities".to_string(),
            ssim_window: "global".to_string(),
            luma_weights: [0.299, 0.587, 0.114],
            c1: SSIM_C1,
            c2: SSIM_C2,
        }
    }
}

pub fn write_pairs(mut w: impl Write, header: &PairsHeader, pairs: &[SimilarityPair]) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n").map_err(|e| Error::io("pairs", e))?;
    write_jsonl(w, pairs)
}

/// Reads a pairs file; the header line is optional.
pub fn read_pairs(r: impl BufRead) -> Result<(Option<PairsHeader>, Vec<SimilarityPair>)> {
    let mut header = None;
    let mut pairs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("pairs", e))?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && line.contains(PairsHeader::KIND) {
            header = Some(serde_json::from_str(&line)?);
        } else {
            pairs.push(serde_json::from_str(&line).map_err(|e| {
                Error::format("pairs", format!("line {}: {e}", i + 1))
            })?);
        }
    }
    Ok((header, pairs))
}

pub fn read_decisions(r: impl BufRead) -> Result<Vec<ReviewDecision>> {
    read_jsonl(r, "decisions")
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io("jsonl", e))?;
    }
    w.flush().map_err(|e| Error::io("jsonl", e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(r: impl BufRead, kind: &'static str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(kind, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(kind, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
