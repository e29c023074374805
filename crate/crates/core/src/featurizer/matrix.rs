use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"RFMX";
const VERSION: u32 = 1;
pub const FLAG_MEAN_SUBTRACTED: u32 = 1;

/// Row-aligned features `X` (N×m), one-hot labels `Y` (N×K) and record ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<S> {
    x: Array2<S>,
    y: Array2<S>,
    labels: Vec<usize>,
    record_ids: Vec<String>,
    flags: u32,
}

impl<S: Scalar> FeatureMatrix<S> {
    pub fn new(x: Array2<S>, labels: Vec<usize>, num_classes: usize, record_ids: Vec<String>) -> Result<Self> {
        if labels.len() != x.nrows() {
            return Err(Error::mismatch("label count", x.nrows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        let mut y = Array2::zeros((labels.len(), num_classes));
        for (i, &l) in labels.iter().enumerate() {
            y[[i, l]] = S::one();
        }
        Self::from_parts(x, y, record_ids, 0)
    }

    /// Validates that `y` is one-hot and aligned with `x` and `record_ids`.
    pub fn from_parts(x: Array2<S>, y: Array2<S>, record_ids: Vec<String>, flags: u32) -> Result<Self> {
        if y.nrows() != x.nrows() {
            return Err(Error::mismatch("label matrix rows", x.nrows(), y.nrows()));
        }
        if record_ids.len() != x.nrows() {
            return Err(Error::mismatch("record id count", x.nrows(), record_ids.len()));
        }
        let mut labels = Vec::with_capacity(y.nrows());
        for (i, row) in y.rows().into_iter().enumerate() {
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == S::one())
                .map(|(j, _)| j)
                .collect();
            let zeros = row.iter().filter(|&&v| v == S::zero()).count();
            if ones.len() != 1 || zeros + 1 != row.len() {
                return Err(Error::invalid(format!("label row {i} is not one-hot")));
            }
            labels.push(ones[0]);
        }
        Ok(FeatureMatrix {
            x,
            y,
            labels,
            record_ids,
            flags,
        })
    }

    pub fn with_flags(mut self, flags: u32) -> Self {
        self.flags = flags;
        self
    }

    pub fn x(&self) -> ArrayView2<'_, S> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView2<'_, S> {
        self.y.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn record_ids(&self) -> &[String] {
        &self.record_ids
    }

    pub fn flags(&self) -> u32 {
        self.flags
    }

    pub fn mean_subtracted(&self) -> bool {
        self.flags & FLAG_MEAN_SUBTRACTED != 0
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.y.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::invalid(format!("row {bad} out of range for {} rows", self.n())));
        }
        Ok(FeatureMatrix {
            x: self.x.select(ndarray::Axis(0), indices),
            y: self.y.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            record_ids: indices.iter().map(|&i| self.record_ids[i].clone()).collect(),
            flags: self.flags,
        })
    }

    /// Same features with labels replaced.
    pub fn relabel(&self, labels: &[usize]) -> Result<Self> {
        Self::new(self.x.clone(), labels.to_vec(), self.k(), self.record_ids.clone())
            .map(|f| f.with_flags(self.flags))
    }

    pub fn cast<T: Scalar>(&self) -> FeatureMatrix<T> {
        FeatureMatrix {
            x: self.x.mapv(|v| T::of(v.as_f64())),
            y: self.y.mapv(|v| T::of(v.as_f64())),
            labels: self.labels.clone(),
            record_ids: self.record_ids.clone(),
            flags: self.flags,
        }
    }

    /// `RFMX` binary: magic, version u32, flags u32, N u64, m u64, K u64, X and Y
    /// as row-major little-endian f32, then newline-joined record ids.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.flags.to_le_bytes())?;
        for dim in [self.n(), self.m(), self.k()] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        write_f32s(&mut w, self.x.iter().copied())?;
        write_f32s(&mut w, self.y.iter().copied())?;
        w.write_all(self.record_ids.join("\n").as_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::format("RFMX", m.to_string());
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(&e.to_string()))?;
        if bytes.len() < 36 || &bytes[..4] != MAGIC {
            return Err(bad("missing RFMX magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let flags = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let dim = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        let (n, m, k) = (dim(12), dim(20), dim(28));
        let x_end = 36 + 4 * n * m;
        let y_end = x_end + 4 * n * k;
        if bytes.len() < y_end {
            return Err(bad("truncated matrix data"));
        }
        let x = Array2::from_shape_vec((n, m), read_f32s(&bytes[36..x_end]))
            .map_err(|e| bad(&e.to_string()))?;
        let y = Array2::from_shape_vec((n, k), read_f32s(&bytes[x_end..y_end]))
            .map_err(|e| bad(&e.to_string()))?;
        let ids = std::str::from_utf8(&bytes[y_end..]).map_err(|_| bad("record ids are not UTF-8"))?;
        let record_ids: Vec<String> = if n == 0 {
            Vec::new()
        } else {
            ids.split('\n').map(str::to_owned).collect()
        };
        let f32m = FeatureMatrix::from_parts(x, y, record_ids, flags)?;
        Ok(f32m.cast())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

pub(crate) fn write_f32s<S: Scalar>(w: &mut impl Write, values: impl Iterator<Item = S>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4096);
    for v in values {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        if buf.len() >= 4096 {
            w.write_all(&buf)?;
            buf.clear();
        }
    }
    w.write_all(&buf)
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}
