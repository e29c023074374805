//! CIFAR-style packed binary: each record is one label byte followed by
//! `H·W·C` pixel bytes stored channel-planar (R plane, G plane, B plane).

use std::path::Path;

use super::{CandidateDataset, Image, ImageRecord, Source};
use crate::error::{Error, Result};

pub fn read_packed_bytes(
    bytes: &[u8],
    shape: (usize, usize, usize),
    class_names: Vec<String>,
    id_prefix: &str,
    source: Source,
) -> Result<CandidateDataset> {
    let (h, w, c) = shape;
    let stride = 1 + h * w * c;
    if bytes.len() % stride != 0 {
        return Err(Error::format(
            "packed",
            format!("length {} is not a multiple of the record size {stride}", bytes.len()),
        ));
    }
    let k = class_names.len();
    let records = bytes
        .chunks_exact(stride)
        .enumerate()
        .map(|(i, chunk)| {
            let label = usize::from(chunk[0]);
            if label >= k {
                return Err(Error::format(
                    "packed",
                    format!("record {i} has label {label}, expected < {k}"),
                ));
            }
            let pixels = Image::from_planar(h, w, c, &chunk[1..])?;
            Ok(ImageRecord::new(format!("{id_prefix}{i}"), pixels, label).with_source(source))
        })
        .collect::<Result<Vec<_>>>()?;
    CandidateDataset::new(records, class_names, 0)
}

/// Reads a packed file; record ids are `<file stem>:<index>`.
pub fn read_packed(
    path: &Path,
    shape: (usize, usize, usize),
    class_names: Vec<String>,
    source: Source,
) -> Result<CandidateDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("packed");
    read_packed_bytes(&bytes, shape, class_names, &format!("{stem}:"), source)
}

pub fn write_packed(dataset: &CandidateDataset, path: &Path) -> Result<()> {
    if dataset.num_classes() > 256 {
        return Err(Error::invalid("packed format stores labels in one byte"));
    }
    let mut out = Vec::new();
    for r in dataset.records() {
        out.push(r.label as u8);
        out.extend_from_slice(&r.pixels.to_planar());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::default_class_names;

    #[test]
    fn cifar_layout() {
        // One 1x2 RGB record: label 1, R plane [1,2], G plane [3,4], B plane [5,6].
        let bytes = [1u8, 1, 2, 3, 4, 5, 6];
        let ds = read_packed_bytes(&bytes, (1, 2, 3), default_class_names(2), "b:", Source::Clean)
            .unwrap();
        let r = &ds.records()[0];
        assert_eq!(r.label, 1);
        assert_eq!(r.id, "b:0");
        assert_eq!(r.pixels.as_bytes(), &[1, 3, 5, 2, 4, 6]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let err = read_packed_bytes(&[0u8; 10], (2, 2, 3), default_class_names(2), "", Source::Clean);
        assert!(err.is_err());
    }
}
