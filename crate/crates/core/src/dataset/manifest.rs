//! Line-delimited JSON manifests referencing PNG files.
//!
//! An optional first line `{"num_classes": K, "class_names": [...], "rng_seed": s}`
//! declares the label space; without it `K` is inferred as `max(label) + 1`.
//! Every other line is `{id, path, label, keyword, source, clean}` with `path`
//! relative to the manifest's directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{default_class_names, CandidateDataset, Image, ImageRecord, Source};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    #[serde(default)]
    rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    path: String,
    label: usize,
    #[serde(default)]
    keyword: String,
    #[serde(default)]
    source: Source,
    #[serde(default)]
    clean: Option<bool>,
}

/// Reads a manifest and decodes every referenced image, keeping manifest order.
pub fn ingest_manifest(manifest_path: &Path) -> Result<CandidateDataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut header: Option<Header> = None;
    let mut lines: Vec<(usize, Line)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if lines.is_empty() && header.is_none() && raw.contains("\"num_classes\"") {
            header = Some(serde_json::from_str(raw).map_err(|e| Error::Manifest {
                line: line_no,
                id: None,
                message: format!("bad header: {e}"),
            })?);
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| Error::Manifest {
            line: line_no,
            id: None,
            message: e.to_string(),
        })?;
        lines.push((line_no, line));
    }

    let (class_names, rng_seed) = match &header {
        Some(h) => {
            let names = h.class_names.clone().unwrap_or_else(|| default_class_names(h.num_classes));
            if names.len() != h.num_classes || h.num_classes == 0 {
                return Err(Error::Manifest {
                    line: 1,
                    id: None,
                    message: format!(
                        "header declares {} classes but names {}",
                        h.num_classes,
                        names.len()
                    ),
                });
            }
            (names, h.rng_seed)
        }
        None => {
            let k = lines.iter().map(|(_, l)| l.label + 1).max().unwrap_or(1);
            (default_class_names(k), 0)
        }
    };
    let k = class_names.len();

    let decoded: Vec<Result<ImageRecord>> = lines
        .into_par_iter()
        .map(|(line_no, line)| {
            let fail = |message: String| Error::Manifest {
                line: line_no,
                id: Some(line.id.clone()),
                message,
            };
            if line.label >= k {
                return Err(fail(format!("label {} out of range for {k} classes", line.label)));
            }
            let path = base.join(&line.path);
            if !path.is_file() {
                return Err(fail(format!("image file not found: {}", path.display())));
            }
            let pixels = Image::open(&path).map_err(|e| fail(format!("cannot decode image: {e}")))?;
            Ok(ImageRecord {
                id: line.id,
                pixels,
                label: line.label,
                keyword: line.keyword,
                source: line.source,
                clean_flag: line.clean,
            })
        })
        .collect();

    let mut records = Vec::with_capacity(decoded.len());
    for rec in decoded {
        records.push(rec?);
    }
    if let Some(first) = records.first() {
        let shape = first.pixels.shape();
        // Line numbers are recovered from the manifest text for the error message.
        if let Some(bad) = records.iter().position(|r| r.pixels.shape() != shape) {
            let rec = &records[bad];
            return Err(Error::Manifest {
                line: line_of(&text, &rec.id),
                id: Some(rec.id.clone()),
                message: format!(
                    "image shape {:?} differs from first record's {:?}",
                    rec.pixels.shape(),
                    shape
                ),
            });
        }
    }
    CandidateDataset::new(records, class_names, rng_seed).map_err(|e| Error::Manifest {
        line: 0,
        id: None,
        message: e.to_string(),
    })
}

fn line_of(text: &str, id: &str) -> usize {
    let needle = format!("\"id\":{}", serde_json::to_string(id).unwrap_or_default());
    text.lines()
        .position(|l| l.replace(' ', "").contains(&needle))
        .map_or(0, |i| i + 1)
}

/// Writes `dir/manifest.jsonl` plus one PNG per record under `dir/images/`.
///
/// Output is a deterministic function of the dataset.
pub fn write_manifest(dataset: &CandidateDataset, dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        num_classes: dataset.num_classes(),
        class_names: Some(dataset.class_names().to_vec()),
        rng_seed: dataset.rng_seed(),
    };
    let io = |e| Error::io(&manifest, e);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(io)?;

    let pngs: Vec<Vec<u8>> = dataset.records().par_iter().map(|r| r.pixels.to_png()).collect();
    for (i, (rec, png)) in dataset.records().iter().zip(pngs).enumerate() {
        let rel = format!("images/{i:06}.png");
        let path = dir.join(&rel);
        fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
        let line = Line {
            id: rec.id.clone(),
            path: rel,
            label: rec.label,
            keyword: rec.keyword.clone(),
            source: rec.source,
            clean: rec.clean_flag,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(manifest)
}
