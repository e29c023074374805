//! Spectral prediction of gradient-descent residuals.
//!
//! For `Z₀ = 0` and the update `Z ← Z − η Xᵀ(XZ − Y)`, the residual evolves as
//! `R_t = (I − η XXᵀ)^t Y`, so with `XXᵀ = Σ σᵢ² vᵢvᵢᵀ` each label column obeys
//! `‖y − X z_t‖² = Σᵢ (1 − ησᵢ²)^{2t} ⟨y, vᵢ⟩²` exactly. Directions with
//! `σᵢ² = 0` never decay and make up the residual floor.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::FeatureMatrix;
use crate::linalg::SymmetricEigen;
use crate::scalar::Scalar;

/// Default cap on `N`, the Gram matrix being `N × N`.
pub const DEFAULT_MAX_ROWS: usize = 5000;

/// Eigenvalues below this fraction of the largest count as zero.
pub const ZERO_EIGEN_RATIO: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    /// `σᵢ²`, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// `vᵢ` as columns; omitted from JSON.
    #[serde(skip)]
    pub eigenvectors: Array2<f64>,
    /// `alignments[i][k] = ⟨y_k, vᵢ⟩`.
    pub alignments: Vec<Vec<f64>>,
    /// `‖P_⊥ y_k‖²`, the label energy outside the range of `XXᵀ`.
    pub residual_floor: Vec<f64>,
    /// `‖y_k‖²`.
    pub label_energy: Vec<f64>,
    /// Number of eigenvalues treated as nonzero.
    pub rank: usize,
}

/// Eigendecomposition of `XXᵀ` (in `f64`) with label alignments for every column of `Y`.
pub fn decompose<S: Scalar>(features: &FeatureMatrix<S>) -> Result<SpectrumProfile> {
    decompose_capped(features, DEFAULT_MAX_ROWS)
}

pub fn decompose_capped<S: Scalar>(features: &FeatureMatrix<S>, max_rows: usize) -> Result<SpectrumProfile> {
    let n = features.n();
    if n > max_rows {
        return Err(Error::invalid(format!(
            "{n} rows exceed the Gram matrix cap of {max_rows}"
        )));
    }
    let x = features.x().mapv(Scalar::as_f64);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("feature matrix has non-finite entries"));
    }
    let y = features.y().mapv(Scalar::as_f64);
    let gram = x.dot(&x.t());
    let eig = SymmetricEigen::new(gram.view())?;
    Ok(profile_from_eigen(eig, y.view()))
}

fn profile_from_eigen(eig: SymmetricEigen<f64>, y: ArrayView2<'_, f64>) -> SpectrumProfile {
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let rank = eigenvalues
        .iter()
        .take_while(|&&v| top > 0.0 && v >= ZERO_EIGEN_RATIO * top)
        .count();
    let proj = eig.eigenvectors.t().dot(&y); // n × K
    let residual_floor = proj
        .axis_iter(Axis(1))
        .map(|col| col.iter().skip(rank).map(|a| a * a).sum())
        .collect();
    let label_energy = y
        .axis_iter(Axis(1))
        .map(|col| col.iter().map(|v| v * v).sum())
        .collect();
    SpectrumProfile {
        eigenvalues,
        eigenvectors: eig.eigenvectors,
        alignments: proj.rows().into_iter().map(|r| r.to_vec()).collect(),
        residual_floor,
        label_energy,
        rank,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualPrediction {
    pub t: usize,
    pub per_column: Vec<f64>,
    pub total: f64,
    /// `η σ_max² ≥ 2`: the iteration is unstable and the values blow up.
    pub divergent: bool,
}

impl SpectrumProfile {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn k(&self) -> usize {
        self.label_energy.len()
    }

    pub fn sigma_max_sq(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// Predicted `‖y_k − X z_t‖²` for every label column after `t` steps of size `eta`.
    pub fn predict_residual(&self, eta: f64, t: usize) -> Result<ResidualPrediction> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid("step size must be positive"));
        }
        let mut per_column = self.residual_floor.clone();
        for (lambda, row) in self.eigenvalues.iter().zip(&self.alignments).take(self.rank) {
            let decay = decay_factor(1.0 - eta * lambda, t);
            for (acc, a) in per_column.iter_mut().zip(row) {
                *acc += decay * a * a;
            }
        }
        Ok(ResidualPrediction {
            t,
            total: per_column.iter().sum(),
            per_column,
            divergent: eta * self.sigma_max_sq() >= 2.0,
        })
    }

    /// Fraction of label energy carried by the top `⌈top_fraction · n⌉`
    /// eigendirections (at most the nonzero ones), for a clean and a noisy
    /// label matrix.
    pub fn alignment_report(
        &self,
        clean_labels: ArrayView2<'_, f64>,
        noisy_labels: ArrayView2<'_, f64>,
        top_fraction: f64,
    ) -> Result<AlignmentSummary> {
        if !(top_fraction > 0.0 && top_fraction <= 1.0) {
            return Err(Error::invalid("top_fraction must be in (0, 1]"));
        }
        let n = self.n();
        for labels in [clean_labels, noisy_labels] {
            if labels.nrows() != n {
                return Err(Error::mismatch("label rows vs spectrum size", n, labels.nrows()));
            }
        }
        // Zero-eigenvalue directions belong to the floor, never to the top set.
        let cut = ((top_fraction * n as f64).ceil() as usize).min(self.rank);
        Ok(AlignmentSummary {
            top_directions: cut,
            clean_energy_fraction: self.energy_fraction(clean_labels, cut),
            noisy_energy_fraction: self.energy_fraction(noisy_labels, cut),
        })
    }

    fn energy_fraction(&self, labels: ArrayView2<'_, f64>, cut: usize) -> f64 {
        let top = self.eigenvectors.slice(ndarray::s![.., ..cut]);
        let proj = top.t().dot(&labels);
        let captured: f64 = proj.iter().map(|a| a * a).sum();
        let total: f64 = labels.iter().map(|v| v * v).sum();
        if total == 0.0 {
            0.0
        } else {
            captured / total
        }
    }

    /// JSON without eigenvectors.
    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Eigenvectors as `RFEV`: magic, n u64, then `n × n` row-major little-endian f64.
    pub fn write_eigenvectors(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(b"RFEV")?;
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        for v in &self.eigenvectors {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// `base^{2t}`.
fn decay_factor(base: f64, t: usize) -> f64 {
    let sq = base * base;
    match i32::try_from(t) {
        Ok(t) => sq.powi(t),
        Err(_) => sq.powf(t as f64),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub top_directions: usize,
    pub clean_energy_fraction: f64,
    pub noisy_energy_fraction: f64,
}

/// Predicted against measured residual at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualComparison {
    pub t: usize,
    pub predicted: Vec<f64>,
    pub measured: Vec<f64>,
    /// Largest per-column `|predicted − measured| / measured`.
    pub max_rel_error: f64,
}

/// Compares predictions with the per-column losses recorded in a trace.
pub fn compare_with_trace<S: Scalar>(
    profile: &SpectrumProfile,
    trace: &crate::trainer::TrainTrace<S>,
) -> Result<Vec<ResidualComparison>> {
    let eta = trace.eta_used.as_f64();
    trace
        .checkpoints
        .iter()
        .map(|c| {
            let pred = profile.predict_residual(eta, c.t)?;
            let measured: Vec<f64> = c.column_loss.iter().map(|v| v.as_f64()).collect();
            if measured.len() != pred.per_column.len() {
                return Err(Error::mismatch("label columns", pred.per_column.len(), measured.len()));
            }
            let max_rel_error = pred
                .per_column
                .iter()
                .zip(&measured)
                .map(|(p, m)| relative_error(*p, *m))
                .fold(0.0, f64::max);
            Ok(ResidualComparison {
                t: c.t,
                predicted: pred.per_column,
                measured,
                max_rel_error,
            })
        })
        .collect()
}

pub fn relative_error(predicted: f64, measured: f64) -> f64 {
    let diff = (predicted - measured).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / measured.abs().max(f64::MIN_POSITIVE)
    }
}

/// Labels as a dense one-hot `N × K` matrix.
pub fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    y
}

impl Default for SpectrumProfile {
    fn default() -> Self {
        profile_from_eigen(
            SymmetricEigen {
                eigenvalues: Array1::zeros(0),
                eigenvectors: Array2::zeros((0, 0)),
            },
            Array2::zeros((0, 0)).view(),
        )
    }
}
