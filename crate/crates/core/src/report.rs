//! Per-class accuracy with exact binomial intervals, confusion breakdowns and
//! CSV exports for plotting.

use std::io::Write;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::CandidateDataset;
use crate::error::{Error, Result};
use crate::featurizer::{FeatureMatrix, RandomFilterBank};
use crate::linalg::argmax;
use crate::scalar::Scalar;
use crate::trainer::TrainTrace;

pub const DEFAULT_ALPHA: f64 = 0.05;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    if x < half {
        // Reflection keeps the series in its accurate range.
        let pi = S::of(std::f64::consts::PI);
        return (pi / (pi * x).sin()).ln() - ln_gamma(S::one() - x);
    }
    let x = x - S::one();
    let mut acc = S::of(LANCZOS[0]);
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += S::of(c) / (x + S::of_usize(i));
    }
    let t = x + S::of(LANCZOS_G) + half;
    S::of(0.5 * (2.0 * std::f64::consts::PI).ln()) + (x + half) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn betainc<S: Scalar>(a: S, b: S, x: S) -> S {
    if x <= S::zero() {
        return S::zero();
    }
    if x >= S::one() {
        return S::one();
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (S::one() - x).ln();
    let front = ln_front.exp();
    if x < (a + S::one()) / (a + b + S::of(2.0)) {
        front * beta_cf(a, b, x) / a
    } else {
        S::one() - front * beta_cf(b, a, S::one() - x) / b
    }
}

// Modified Lentz evaluation of the continued fraction for I_x(a, b).
fn beta_cf<S: Scalar>(a: S, b: S, x: S) -> S {
    let tiny = S::min_positive_value() / S::epsilon();
    let eps = S::epsilon();
    let one = S::one();
    let clamp = |v: S| if v.abs() < tiny { tiny } else { v };
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;
    let mut c = one;
    let mut d = one / clamp(one - qab * x / qap);
    let mut h = d;
    for m in 1..=300usize {
        let m = S::of_usize(m);
        let m2 = m + m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one / clamp(one + aa * d);
        c = clamp(one + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one / clamp(one + aa * d);
        c = clamp(one + aa / c);
        let delta = d * c;
        h *= delta;
        if (delta - one).abs() <= eps {
            break;
        }
    }
    h
}

/// `q` with `I_q(a, b) = p`, by bisection to an interval width of 1e-12.
pub fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if betainc(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided exact binomial interval at level `1 − α`.
pub fn clopper_pearson(successes: usize, trials: usize, alpha: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::invalid("clopper_pearson needs at least one trial"));
    }
    if successes > trials {
        return Err(Error::invalid(format!("{successes} successes exceed {trials} trials")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let (x, n) = (successes as f64, trials as f64);
    let half = alpha / 2.0;
    let low = match successes {
        0 => 0.0,
        s if s == trials => half.powf(1.0 / n),
        _ => beta_quantile(half, x, n - x + 1.0),
    };
    let high = match successes {
        s if s == trials => 1.0,
        0 => 1.0 - half.powf(1.0 / n),
        _ => beta_quantile(1.0 - half, x + 1.0, n - x),
    };
    Ok((low, high))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Set for classes without test records; the interval is then `[0, 1]`.
    #[serde(default)]
    pub undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassAccuracy>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub overall_accuracy: f64,
}

impl EvalResult {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize, alpha: f64) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty test set"));
        }
        if truth.len() != predicted.len() {
            return Err(Error::mismatch("prediction count", truth.len(), predicted.len()));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::invalid(format!("class {} out of range for K = {num_classes}", t.max(p))));
            }
            confusion[t][p] += 1;
        }
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                let correct = row[c];
                if total == 0 {
                    return Ok(ClassAccuracy {
                        class: c,
                        correct,
                        total,
                        accuracy: 0.0,
                        ci_low: 0.0,
                        ci_high: 1.0,
                        undefined: true,
                    });
                }
                let (ci_low, ci_high) = clopper_pearson(correct, total, alpha)?;
                Ok(ClassAccuracy {
                    class: c,
                    correct,
                    total,
                    accuracy: correct as f64 / total as f64,
                    ci_low,
                    ci_high,
                    undefined: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let hits: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        Ok(EvalResult {
            per_class,
            confusion,
            overall_accuracy: hits as f64 / truth.len() as f64,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Columns: `class,correct,total,accuracy,ci_low,ci_high,undefined`.
    pub fn write_per_class_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.per_class {
            out.serialize(row)?;
        }
        out.flush().map_err(|e| Error::io("per-class csv", e))
    }
}

/// Predicts with `G(x) Z` image by image.
pub fn evaluate<S: Scalar>(
    z: ArrayView2<'_, S>,
    bank: &RandomFilterBank<S>,
    test: &CandidateDataset,
) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test set"));
    }
    if z.ncols() != test.num_classes() {
        return Err(Error::mismatch("weight columns vs classes", test.num_classes(), z.ncols()));
    }
    let predicted = test
        .records()
        .par_iter()
        .map(|r| bank.predict(z, &r.pixels))
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_predictions(&test.labels(), &predicted, test.num_classes(), DEFAULT_ALPHA)
}

/// Same as [`evaluate`] on already-featurized records.
pub fn evaluate_features<S: Scalar>(z: ArrayView2<'_, S>, test: &FeatureMatrix<S>) -> Result<EvalResult> {
    if z.nrows() != test.m() || z.ncols() != test.k() {
        return Err(Error::mismatch(
            "weights vs features",
            format!("{}x{}", test.m(), test.k()),
            format!("{}x{}", z.nrows(), z.ncols()),
        ));
    }
    let scores = test.x().dot(&z);
    let predicted: Vec<usize> = scores.rows().into_iter().map(argmax).collect();
    EvalResult::from_predictions(test.labels(), &predicted, test.k(), DEFAULT_ALPHA)
}

/// Where the test records of `class` ended up: the correct fraction first,
/// then every other class with nonzero mass, largest first (ties by class).
pub fn confusion_breakdown(result: &EvalResult, class: usize) -> Result<Vec<(usize, f64)>> {
    let row = result
        .confusion
        .get(class)
        .ok_or_else(|| Error::invalid(format!("class {class} out of range")))?;
    let total: usize = row.iter().sum();
    if total == 0 {
        return Err(Error::invalid(format!("class {class} has no test records")));
    }
    let frac = |c: usize| row[c] as f64 / total as f64;
    let mut rest: Vec<usize> = (0..row.len()).filter(|&c| c != class && row[c] > 0).collect();
    rest.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
    let mut out = vec![(class, frac(class))];
    out.extend(rest.into_iter().map(|c| (c, frac(c))));
    Ok(out)
}

#[derive(Serialize)]
struct CurveRow {
    t: usize,
    loss: f64,
    train_acc: f64,
    clean_acc: Option<f64>,
    holdout_acc: Option<f64>,
}

/// Columns: `t,loss,train_acc,clean_acc,holdout_acc` (empty when not tracked).
pub fn write_learning_curve_csv<S: Scalar>(trace: &TrainTrace<S>, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for c in &trace.checkpoints {
        out.serialize(CurveRow {
            t: c.t,
            loss: c.loss.as_f64(),
            train_acc: c.train_acc,
            clean_acc: c.clean_acc,
            holdout_acc: c.holdout_acc,
        })?;
    }
    out.flush().map_err(|e| Error::io("learning curve csv", e))
}
