use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use lnlab_core::dedup::{read_decisions, ReviewDecision, SimilarityPair, Verdict};
use lnlab_core::{Error, Result};
use serde::Serialize;

use crate::clock::Clock;

pub const LEASE: Duration = Duration::from_secs(10 * 60);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PairStatus {
    Pending,
    Assigned { reviewer: String, expires: Duration },
    Decided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub total: usize,
    pub decided: usize,
    pub pending: usize,
    pub leased: usize,
}

struct Inner {
    status: Vec<PairStatus>,
    log: File,
}

/// Assignment state over a fixed list of pairs, backed by a JSONL decision log.
///
/// The log is the only durable state: opening a session replays it, and every
/// decision is flushed to disk before it is acknowledged.
pub struct ReviewSession {
    pairs: Vec<SimilarityPair>,
    index: HashMap<String, usize>,
    log_path: PathBuf,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

impl ReviewSession {
    pub fn open(pairs: Vec<SimilarityPair>, log_path: &Path, clock: Arc<dyn Clock>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            if index.insert(p.pair_id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate pair id {}", p.pair_id)));
            }
        }
        let mut status = vec![PairStatus::Pending; pairs.len()];
        if log_path.exists() {
            let file = File::open(log_path).map_err(|e| Error::Io {
                path: log_path.to_path_buf(),
                source: e,
            })?;
            for d in read_decisions(BufReader::new(file))? {
                let i = *index.get(&d.pair_id).ok_or_else(|| Error::UnknownPair(d.pair_id.clone()))?;
                status[i] = PairStatus::Decided;
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| Error::Io {
                path: log_path.to_path_buf(),
                source: e,
            })?;
        Ok(ReviewSession {
            pairs,
            index,
            log_path: log_path.to_path_buf(),
            clock,
            inner: Mutex::new(Inner { status, log }),
        })
    }

    pub fn pairs(&self) -> &[SimilarityPair] {
        &self.pairs
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn status(&self, pair_id: &str) -> Option<PairStatus> {
        let i = *self.index.get(pair_id)?;
        let mut inner = self.inner.lock().unwrap();
        self.expire(&mut inner);
        Some(inner.status[i].clone())
    }

    fn expire(&self, inner: &mut Inner) {
        let now = self.clock.monotonic();
        for s in &mut inner.status {
            if matches!(s, PairStatus::Assigned { expires, .. } if *expires <= now) {
                *s = PairStatus::Pending;
            }
        }
    }

    /// Leases the first pending pair to `reviewer`.
    ///
    /// A reviewer who already holds a live lease gets that pair back with a
    /// fresh expiry, so re-fetching after a failed submission is safe.
    pub fn next_pair(&self, reviewer: &str) -> Option<SimilarityPair> {
        let mut inner = self.inner.lock().unwrap();
        self.expire(&mut inner);
        let expires = self.clock.monotonic() + LEASE;
        let held = inner
            .status
            .iter()
            .position(|s| matches!(s, PairStatus::Assigned { reviewer: r, .. } if r == reviewer));
        let slot = held.or_else(|| inner.status.iter().position(|s| *s == PairStatus::Pending))?;
        inner.status[slot] = PairStatus::Assigned {
            reviewer: reviewer.to_string(),
            expires,
        };
        Some(self.pairs[slot].clone())
    }

    /// Appends the verdict to the log, syncs it, then marks the pair decided.
    pub fn record_decision(&self, pair_id: &str, verdict: Verdict, reviewer: &str) -> Result<ReviewDecision> {
        let i = *self
            .index
            .get(pair_id)
            .ok_or_else(|| Error::UnknownPair(pair_id.to_string()))?;
        let decision = ReviewDecision {
            pair_id: pair_id.to_string(),
            verdict,
            reviewer: reviewer.to_string(),
            timestamp: self.clock.epoch_millis(),
        };
        let mut line = serde_json::to_vec(&decision)?;
        line.push(b'\n');
        let mut inner = self.inner.lock().unwrap();
        let io = |e| Error::Io {
            path: self.log_path.clone(),
            source: e,
        };
        inner.log.write_all(&line).map_err(io)?;
        inner.log.flush().map_err(io)?;
        inner.log.sync_data().map_err(io)?;
        inner.status[i] = PairStatus::Decided;
        Ok(decision)
    }

    pub fn progress(&self) -> Progress {
        let mut inner = self.inner.lock().unwrap();
        self.expire(&mut inner);
        let mut p = Progress {
            total: inner.status.len(),
            decided: 0,
            pending: 0,
            leased: 0,
        };
        for s in &inner.status {
            match s {
                PairStatus::Pending => p.pending += 1,
                PairStatus::Assigned { .. } => p.leased += 1,
                PairStatus::Decided => p.decided += 1,
            }
        }
        p
    }
}
