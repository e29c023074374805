//! One-layer random convolutional featurizer.
//!
//! Each filter is correlated with the image (valid, stride 1), the response is
//! split into two rectified polarities `max(r - b, 0)` and `max(-r - b, 0)`,
//! and each polarity map is average-pooled over a `p × p` grid. A bank with
//! `F` filters therefore produces `F · 2 · p²` features per image.

mod matrix;

use ndarray::{Array1, Array2, Array4, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateDataset, Image};
use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::scalar::Scalar;

pub use self::matrix::{FeatureMatrix, FLAG_MEAN_SUBTRACTED};
pub(crate) use self::matrix::{read_f32s, write_f32s};

/// Everything needed to regenerate a filter bank bit for bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterBankSpec {
    pub seed: u64,
    pub num_filters: usize,
    pub kernel: usize,
    pub channels: usize,
    pub pool_grid: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomFilterBank<S> {
    /// `F × C × k × k`.
    filters: Array4<S>,
    biases: Array1<S>,
    spec: FilterBankSpec,
}

/// Filters with i.i.d. `N(0, 1)` entries scaled by `1/√(C·k²)`, zero biases.
pub fn make_filter_bank<S: Scalar>(
    num_filters: usize,
    kernel: usize,
    channels: usize,
    pool_grid: usize,
    seed: u64,
) -> Result<RandomFilterBank<S>> {
    RandomFilterBank::from_spec(FilterBankSpec {
        seed,
        num_filters,
        kernel,
        channels,
        pool_grid,
    })
}

impl<S: Scalar> RandomFilterBank<S> {
    pub fn from_spec(spec: FilterBankSpec) -> Result<Self> {
        let FilterBankSpec {
            seed,
            num_filters,
            kernel,
            channels,
            pool_grid,
        } = spec;
        if num_filters == 0 || kernel == 0 || channels == 0 || pool_grid == 0 {
            return Err(Error::invalid(format!(
                "filter bank dimensions must be positive, got F={num_filters} k={kernel} C={channels} p={pool_grid}"
            )));
        }
        let fan_in = (channels * kernel * kernel) as f64;
        let scale = 1.0 / fan_in.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = Array4::from_shape_simple_fn((num_filters, channels, kernel, kernel), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            S::of(z * scale)
        });
        Ok(RandomFilterBank {
            filters,
            biases: Array1::zeros(num_filters),
            spec,
        })
    }

    pub fn spec(&self) -> FilterBankSpec {
        self.spec
    }

    pub fn filters(&self) -> &Array4<S> {
        &self.filters
    }

    pub fn biases(&self) -> &Array1<S> {
        &self.biases
    }

    pub fn num_filters(&self) -> usize {
        self.spec.num_filters
    }

    pub fn kernel(&self) -> usize {
        self.spec.kernel
    }

    pub fn channels(&self) -> usize {
        self.spec.channels
    }

    pub fn pool_grid(&self) -> usize {
        self.spec.pool_grid
    }

    /// `m = F · 2 · p²`.
    pub fn feature_dim(&self) -> usize {
        self.spec.num_filters * 2 * self.spec.pool_grid * self.spec.pool_grid
    }

    fn check_shape(&self, (h, w, c): (usize, usize, usize)) -> Result<()> {
        let k = self.kernel();
        if c != self.channels() {
            return Err(Error::mismatch("image channels vs filter bank", self.channels(), c));
        }
        if k > h || k > w {
            return Err(Error::mismatch("kernel size vs image", format!("k <= {}", h.min(w)), k));
        }
        let p = self.pool_grid();
        if p > h - k + 1 || p > w - k + 1 {
            return Err(Error::mismatch(
                "pool grid vs response map",
                format!("p <= {}", (h - k + 1).min(w - k + 1)),
                p,
            ));
        }
        Ok(())
    }

    /// `G(x)` for a single image.
    pub fn features(&self, image: &Image) -> Result<Array1<S>> {
        self.check_shape(image.shape())?;
        Ok(self.features_unchecked(image))
    }

    fn features_unchecked(&self, image: &Image) -> Array1<S> {
        let (h, w, c) = image.shape();
        let k = self.kernel();
        let (hr, wr) = (h - k + 1, w - k + 1);

        // v/255 − mean, with the numerator formed in integers so constant images map to exact zeros.
        let bytes = image.as_bytes();
        let count = bytes.len() as i64;
        let total: i64 = bytes.iter().map(|&v| i64::from(v)).sum();
        let denom = 255.0 * count as f64;
        let pixels: Vec<S> = bytes
            .iter()
            .map(|&v| S::of((i64::from(v) * count - total) as f64 / denom))
            .collect();

        // Patch rows ordered like the filters: (channel, dy, dx).
        let patch_len = c * k * k;
        let mut patches = Array2::<S>::zeros((hr * wr, patch_len));
        for i in 0..hr {
            for j in 0..wr {
                let mut row = patches.row_mut(i * wr + j);
                let mut q = 0;
                for ch in 0..c {
                    for di in 0..k {
                        let base = ((i + di) * w + j) * c + ch;
                        for dj in 0..k {
                            row[q] = pixels[base + dj * c];
                            q += 1;
                        }
                    }
                }
            }
        }
        let flat: ArrayView2<'_, S> = self
            .filters
            .view()
            .into_shape_with_order((self.num_filters(), patch_len))
            .expect("filters are contiguous");
        let responses = patches.dot(&flat.t()); // (hr·wr) × F

        let p = self.pool_grid();
        let rows = cell_bounds(hr, p);
        let cols = cell_bounds(wr, p);
        let mut out = Array1::zeros(self.feature_dim());
        let zero = S::zero();
        for f in 0..self.num_filters() {
            let b = self.biases[f];
            for (cr, &(r0, r1)) in rows.iter().enumerate() {
                for (cc, &(c0, c1)) in cols.iter().enumerate() {
                    let mut pos = zero;
                    let mut neg = zero;
                    for i in r0..r1 {
                        for j in c0..c1 {
                            let r = responses[[i * wr + j, f]];
                            pos += (r - b).max(zero);
                            neg += (-r - b).max(zero);
                        }
                    }
                    let area = S::of_usize((r1 - r0) * (c1 - c0));
                    out[((2 * f) * p + cr) * p + cc] = pos / area;
                    out[((2 * f + 1) * p + cr) * p + cc] = neg / area;
                }
            }
        }
        out
    }

    /// Class `argmax_k (G(x) Z)_k`, lowest class on ties.
    pub fn predict(&self, z: ArrayView2<'_, S>, image: &Image) -> Result<usize> {
        if z.nrows() != self.feature_dim() {
            return Err(Error::mismatch("weight rows vs feature dim", self.feature_dim(), z.nrows()));
        }
        if z.ncols() == 0 {
            return Err(Error::invalid("weight matrix has no classes"));
        }
        let g = self.features(image)?;
        Ok(argmax(g.dot(&z).view()))
    }
}

/// `p` contiguous cells covering `0..len`, sizes differing by at most one.
pub(crate) fn cell_bounds(len: usize, p: usize) -> Vec<(usize, usize)> {
    (0..p).map(|i| (i * len / p, (i + 1) * len / p)).collect()
}

/// Feature matrix for every record, rows in dataset order.
pub fn featurize<S: Scalar>(bank: &RandomFilterBank<S>, dataset: &CandidateDataset) -> Result<FeatureMatrix<S>> {
    let m = bank.feature_dim();
    if let Some(shape) = dataset.image_shape() {
        bank.check_shape(shape)?;
    }
    let rows: Vec<Array1<S>> = dataset
        .records()
        .par_iter()
        .map(|r| bank.features_unchecked(&r.pixels))
        .collect();
    let mut x = Array2::zeros((rows.len(), m));
    for (mut dst, src) in x.rows_mut().into_iter().zip(&rows) {
        dst.assign(src);
    }
    let ids = dataset.records().iter().map(|r| r.id.clone()).collect();
    Ok(FeatureMatrix::new(x, dataset.labels(), dataset.num_classes(), ids)?.with_flags(FLAG_MEAN_SUBTRACTED))
}
