//! Full-batch gradient descent on `‖Y − XZ‖²_F` with checkpointed traces and
//! early-stopping rules.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::FeatureMatrix;
use crate::linalg::{argmax, top_gram_eigenvalue, PowerIteration};
use crate::scalar::Scalar;

/// Gradient step size: a fixed value or `1/σ_max²` of `XᵀX`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum StepSize {
    Fixed(f64),
    #[default]
    Auto,
}

impl Serialize for StepSize {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        match self {
            StepSize::Fixed(v) => s.serialize_f64(*v),
            StepSize::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for StepSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(StepSize::Fixed(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl std::str::FromStr for StepSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(StepSize::Auto);
        }
        s.parse::<f64>()
            .map(StepSize::Fixed)
            .map_err(|_| format!("step size must be a number or \"auto\", got {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[default]
    Zero,
}

/// Which iterate is carried between steps.
///
/// `Primal` updates `Z` directly. `Gram` keeps `A` with `Z = XᵀA`, which
/// yields the same iterates (`Z_t` stays in the row space of `X` when `Z₀ = 0`)
/// at `O(N²K)` per step instead of `O(NmK)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GdForm {
    #[default]
    Auto,
    Primal,
    Gram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub step_size: StepSize,
    pub max_iters: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub clean_threshold: f64,
    pub init: Init,
    /// Upper bound on retained `Z` snapshots (at least 2).
    pub max_snapshots: usize,
    pub form: GdForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: StepSize::Auto,
            max_iters: 1000,
            eval_interval: 10,
            seed: 0,
            clean_threshold: 0.99,
            init: Init::Zero,
            max_snapshots: 16,
            form: GdForm::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be positive"));
        }
        if self.eval_interval == 0 || self.eval_interval > self.max_iters {
            return Err(Error::invalid("eval_interval must be in 1..=max_iters"));
        }
        if !(self.clean_threshold > 0.0 && self.clean_threshold <= 1.0) {
            return Err(Error::invalid("clean_threshold must be in (0, 1]"));
        }
        if let StepSize::Fixed(eta) = self.step_size {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::invalid("step size must be positive"));
            }
        }
        if self.max_snapshots < 2 {
            return Err(Error::invalid("max_snapshots must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<S> {
    pub t: usize,
    pub loss: S,
    /// `‖y_k − X z_k‖²` per label column; sums to `loss`.
    pub column_loss: Vec<S>,
    pub train_acc: f64,
    pub clean_acc: Option<f64>,
    pub holdout_acc: Option<f64>,
    /// Index into [`TrainTrace::snapshots`] when `Z` was retained here.
    pub snapshot: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<S> {
    pub t: usize,
    pub z: Array2<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace<S> {
    pub checkpoints: Vec<Checkpoint<S>>,
    pub snapshots: Vec<Snapshot<S>>,
    pub eta_used: S,
    pub sigma_max_sq: S,
}

impl<S: Scalar> TrainTrace<S> {
    /// First checkpoint whose `metric` reaches `threshold`.
    pub fn first_reaching(&self, metric: impl Fn(&Checkpoint<S>) -> Option<f64>, threshold: f64) -> Option<usize> {
        self.checkpoints
            .iter()
            .position(|c| metric(c).is_some_and(|v| v >= threshold))
    }

    pub fn last(&self) -> &Checkpoint<S> {
        self.checkpoints.last().expect("a trace has at least one checkpoint")
    }

    /// Snapshot retained at checkpoint `index`, if any.
    pub fn snapshot_at(&self, index: usize) -> Option<&Snapshot<S>> {
        self.checkpoints.get(index)?.snapshot.map(|s| &self.snapshots[s])
    }

    /// One JSON object per checkpoint: `{t, loss, train_acc, clean_acc, holdout_acc}`.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for c in &self.checkpoints {
            let line = serde_json::json!({
                "t": c.t,
                "loss": c.loss.as_f64(),
                "train_acc": c.train_acc,
                "clean_acc": c.clean_acc,
                "holdout_acc": c.holdout_acc,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Minimizes `‖Y − XZ‖²_F` from `Z₀ = 0` with `Z ← Z − η Xᵀ(XZ − Y)`.
pub fn train<S: Scalar>(
    features: &FeatureMatrix<S>,
    config: &TrainConfig,
    clean_indices: Option<&[usize]>,
    holdout: Option<&FeatureMatrix<S>>,
) -> Result<TrainTrace<S>> {
    config.validate()?;
    let x = features.x();
    let y = features.y();
    let (n, m) = x.dim();
    let k = y.ncols();
    if let Some(&bad) = clean_indices.into_iter().flatten().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("clean index {bad} out of range for {n} rows")));
    }
    if let Some(h) = holdout {
        if h.m() != m || h.k() != k {
            return Err(Error::mismatch(
                "holdout features",
                format!("m={m}, K={k}"),
                format!("m={}, K={}", h.m(), h.k()),
            ));
        }
    }
    let clean_indices = clean_indices.filter(|c| !c.is_empty());

    let power = PowerIteration {
        seed: config.seed,
        ..PowerIteration::default()
    };
    let use_gram = match config.form {
        GdForm::Primal => false,
        GdForm::Gram => true,
        GdForm::Auto => n < m,
    };
    let gram = use_gram.then(|| x.dot(&x.t()));
    let sigma_max_sq = match &gram {
        Some(g) => power.run(n, |v| g.dot(v)),
        None => top_gram_eigenvalue(x, &power),
    };
    let eta = match config.step_size {
        StepSize::Fixed(v) => S::of(v),
        StepSize::Auto if sigma_max_sq > S::zero() => S::one() / sigma_max_sq,
        StepSize::Auto => S::one(),
    };

    let mut state = match gram {
        Some(g) => Iterate::Gram {
            holdout_cross: holdout.map(|h| h.x().dot(&x.t())),
            gram: g,
            coef: Array2::zeros((n, k)),
        },
        None => Iterate::Primal { z: Array2::zeros((m, k)) },
    };
    let mut pred = Array2::<S>::zeros((n, k));
    let mut snapshots = SnapshotKeeper::new(config.max_snapshots);
    let mut checkpoints = Vec::new();

    let t_max = config.max_iters;
    for t in 0..=t_max {
        let resid = &y - &pred;
        let column_loss: Vec<S> = resid
            .axis_iter(Axis(1))
            .map(|c| c.iter().map(|&v| v * v).sum())
            .collect();
        let loss: S = column_loss.iter().copied().sum();
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: t });
        }

        if t == 0 || t % config.eval_interval == 0 || t == t_max {
            let predicted: Vec<usize> = pred.rows().into_iter().map(argmax).collect();
            let labels = features.labels();
            let train_acc = accuracy(&predicted, labels, 0..n);
            let clean_acc = clean_indices.map(|idx| accuracy(&predicted, labels, idx.iter().copied()));
            let holdout_acc = holdout.map(|h| {
                let scores = state.holdout_scores(x, h.x());
                let hp: Vec<usize> = scores.rows().into_iter().map(argmax).collect();
                accuracy(&hp, h.labels(), 0..h.n())
            });
            let index = checkpoints.len();
            let snapshot = snapshots.offer(index, t == t_max, || Snapshot { t, z: state.weights(x) });
            checkpoints.push(Checkpoint {
                t,
                loss,
                column_loss,
                train_acc,
                clean_acc,
                holdout_acc,
                snapshot,
            });
        }
        if t == t_max {
            break;
        }
        pred = state.step(x, &resid, eta);
    }

    let snapshots = snapshots.finish(&mut checkpoints);
    Ok(TrainTrace {
        checkpoints,
        snapshots,
        eta_used: eta,
        sigma_max_sq,
    })
}

enum Iterate<S> {
    Primal {
        z: Array2<S>,
    },
    Gram {
        gram: Array2<S>,
        holdout_cross: Option<Array2<S>>,
        coef: Array2<S>,
    },
}

impl<S: Scalar> Iterate<S> {
    /// Applies one step given the current residual and returns the new `XZ`.
    fn step(&mut self, x: ArrayView2<'_, S>, resid: &Array2<S>, eta: S) -> Array2<S> {
        match self {
            Iterate::Primal { z } => {
                z.scaled_add(eta, &x.t().dot(resid));
                x.dot(z)
            }
            Iterate::Gram { gram, coef, .. } => {
                coef.scaled_add(eta, resid);
                gram.dot(coef)
            }
        }
    }

    fn weights(&self, x: ArrayView2<'_, S>) -> Array2<S> {
        match self {
            Iterate::Primal { z } => z.clone(),
            Iterate::Gram { coef, .. } => x.t().dot(coef),
        }
    }

    fn holdout_scores(&self, x: ArrayView2<'_, S>, xh: ArrayView2<'_, S>) -> Array2<S> {
        match self {
            Iterate::Primal { z } => xh.dot(z),
            Iterate::Gram {
                holdout_cross: Some(c),
                coef,
                ..
            } => c.dot(coef),
            Iterate::Gram { coef, .. } => xh.dot(&x.t().dot(coef)),
        }
    }
}

fn accuracy(predicted: &[usize], labels: &[usize], idx: impl Iterator<Item = usize>) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for i in idx {
        total += 1;
        hit += usize::from(predicted[i] == labels[i]);
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Retains the first, the last and every checkpoint's `Z` up to a cap,
/// halving the density (keeping the first) whenever the cap is exceeded.
struct SnapshotKeeper<S> {
    cap: usize,
    stride: usize,
    kept: Vec<(usize, Snapshot<S>)>,
}

impl<S> SnapshotKeeper<S> {
    fn new(cap: usize) -> Self {
        SnapshotKeeper {
            cap,
            stride: 1,
            kept: Vec::new(),
        }
    }

    fn offer(&mut self, index: usize, last: bool, make: impl FnOnce() -> Snapshot<S>) -> Option<usize> {
        if index % self.stride != 0 && !last {
            return None;
        }
        if last && self.kept.len() == self.cap {
            self.kept.pop();
        }
        self.kept.push((index, make()));
        if self.kept.len() > self.cap {
            self.stride *= 2;
            let stride = self.stride;
            self.kept.retain(|(i, _)| i % stride == 0);
        }
        None
    }

    fn finish(self, checkpoints: &mut [Checkpoint<S>]) -> Vec<Snapshot<S>> {
        let mut out = Vec::with_capacity(self.kept.len());
        for (slot, (index, snap)) in self.kept.into_iter().enumerate() {
            checkpoints[index].snapshot = Some(slot);
            out.push(snap);
        }
        out
    }
}

/// First checkpoint with clean-subset accuracy `≥ tau`; otherwise the earliest
/// checkpoint with the highest clean-subset accuracy.
pub fn early_stop_clean<S: Scalar>(trace: &TrainTrace<S>, tau: f64) -> Result<usize> {
    let accs = trace
        .checkpoints
        .iter()
        .map(|c| c.clean_acc)
        .collect::<Option<Vec<f64>>>()
        .filter(|a| !a.is_empty())
        .ok_or_else(|| Error::invalid("trace has no clean-subset accuracy"))?;
    Ok(accs
        .iter()
        .position(|&a| a >= tau)
        .unwrap_or_else(|| earliest_max(&accs)))
}

/// Earliest checkpoint attaining the maximum holdout accuracy.
pub fn early_stop_holdout<S: Scalar>(trace: &TrainTrace<S>) -> Result<usize> {
    let accs = trace
        .checkpoints
        .iter()
        .map(|c| c.holdout_acc)
        .collect::<Option<Vec<f64>>>()
        .filter(|a| !a.is_empty())
        .ok_or_else(|| Error::invalid("trace has no holdout accuracy"))?;
    Ok(earliest_max(&accs))
}

fn earliest_max(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const WEIGHTS_MAGIC: &[u8; 4] = b"RFWZ";

/// `RFWZ` binary: magic, m u64, K u64, then `Z` as row-major little-endian f32.
pub fn write_weights<S: Scalar>(z: ArrayView2<'_, S>, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&(z.nrows() as u64).to_le_bytes())?;
    w.write_all(&(z.ncols() as u64).to_le_bytes())?;
    crate::featurizer::write_f32s(&mut w, z.iter().copied())
}

pub fn read_weights<S: Scalar>(mut r: impl Read) -> Result<Array2<S>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::format("RFWZ", e.to_string()))?;
    if bytes.len() < 20 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::format("RFWZ", "missing RFWZ magic"));
    }
    let m = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let k = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != 20 + 4 * m * k {
        return Err(Error::format("RFWZ", format!("expected {} payload bytes", 4 * m * k)));
    }
    let values = crate::featurizer::read_f32s(&bytes[20..]);
    Array2::from_shape_vec((m, k), values.into_iter().map(|v| S::of(f64::from(v))).collect())
        .map_err(|e| Error::format("RFWZ", e.to_string()))
}

pub fn save_weights<S: Scalar>(z: ArrayView2<'_, S>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(z, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_weights<S: Scalar>(path: &Path) -> Result<Array2<S>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(std::io::BufReader::new(file))
}
