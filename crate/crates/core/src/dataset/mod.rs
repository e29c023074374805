//! Candidate dataset model: images, labeled records, ingestion and splitting.

mod image;
mod manifest;
mod packed;
mod split;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::image::Image;
pub use self::manifest::{ingest_manifest, write_manifest, MANIFEST_FILE};
pub use self::packed::{read_packed, read_packed_bytes, write_packed};
pub use self::split::split;
pub(crate) use self::split::apportion_equal;

/// Where a record came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Clean,
    #[default]
    Candidate,
    Synthetic,
}

/// One labeled image together with the query that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Image,
    pub label: usize,
    pub keyword: String,
    pub source: Source,
    /// `Some(true)` when the label is known to be correct.
    pub clean_flag: Option<bool>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, pixels: Image, label: usize) -> Self {
        ImageRecord {
            id: id.into(),
            pixels,
            label,
            keyword: String::new(),
            source: Source::Candidate,
            clean_flag: None,
        }
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn with_clean_flag(mut self, clean: Option<bool>) -> Self {
        self.clean_flag = clean;
        self
    }

    pub fn with_keyword(mut self, keyword: impl Into<String>) -> Self {
        self.keyword = keyword.into();
        self
    }
}

/// An ordered, validated collection of records over `K` classes.
///
/// Immutable once built: operations that change records return a new dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateDataset {
    records: Vec<ImageRecord>,
    class_names: Vec<String>,
    rng_seed: u64,
}

impl CandidateDataset {
    /// Validates labels, image shapes and id uniqueness.
    pub fn new(records: Vec<ImageRecord>, class_names: Vec<String>, rng_seed: u64) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::invalid("a dataset needs at least one class"));
        }
        let k = class_names.len();
        let mut seen = HashSet::with_capacity(records.len());
        let shape = records.first().map(|r| r.pixels.shape());
        for (i, rec) in records.iter().enumerate() {
            if rec.label >= k {
                return Err(Error::invalid(format!(
                    "record {} ({}) has label {} but the dataset has {k} classes",
                    i, rec.id, rec.label
                )));
            }
            if Some(rec.pixels.shape()) != shape {
                return Err(Error::mismatch(
                    "dataset image shape",
                    format!("{:?}", shape.unwrap()),
                    format!("{:?} for record {}", rec.pixels.shape(), rec.id),
                ));
            }
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::invalid(format!("duplicate record id {:?}", rec.id)));
            }
        }
        Ok(CandidateDataset {
            records,
            class_names,
            rng_seed,
        })
    }

    /// Dataset with default class names `class_0 .. class_{k-1}`.
    pub fn with_num_classes(records: Vec<ImageRecord>, k: usize, rng_seed: u64) -> Result<Self> {
        Self::new(records, default_class_names(k), rng_seed)
    }

    /// New dataset sharing this one's class metadata.
    pub fn derive(&self, records: Vec<ImageRecord>) -> Result<Self> {
        Self::new(records, self.class_names.clone(), self.rng_seed)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ImageRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// `(height, width, channels)` shared by every record, `None` when empty.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.records.first().map(|r| r.pixels.shape())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = indices
            .iter()
            .map(|&i| {
                self.records
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.derive(records)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }
}

pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

/// Indices of records whose label is known to be correct, in dataset order.
pub fn clean_subset_indices(dataset: &CandidateDataset) -> Vec<usize> {
    dataset
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.clean_flag == Some(true))
        .map(|(i, _)| i)
        .collect()
}
