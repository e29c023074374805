//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use lnlab_core::dataset::{clean_subset_indices, CandidateDataset, Image, ImageRecord, Source};
use lnlab_core::dedup::{auto_flag, scan, SimilarityPair};
use lnlab_core::dynamics::{decompose, relative_error};
use lnlab_core::featurizer::{featurize, make_filter_bank, FeatureMatrix};
use lnlab_core::noise::{flip_uniform, make_structured, mix, NoiseSpec};
use lnlab_core::report::clopper_pearson;
use lnlab_core::seed::derive_seed;
use lnlab_core::synth::{ClassPrototypes, PrototypeSpec};
use lnlab_core::trainer::{early_stop_clean, early_stop_holdout, train, GdForm, TrainConfig, TrainTrace};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    let line = format!("[{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    println!("{line}");
    Outcome { name, passed, detail }
}

// ------------------------------------------------------------------ spectral exactness

fn spectral_exactness() -> Outcome {
    let start = Instant::now();
    let mut instances = 0;
    let mut worst_shallow = 0.0f64;
    let mut worst_deep = 0.0f64;
    let mut checkpoints = 0;
    let mut failures = Vec::new();
    for &n in &[50usize, 200] {
        for &m in &[100usize, 1000] {
            for &k in &[2usize, 10] {
                for rep in 0..3u64 {
                    let seed = derive_seed(rep, &format!("spectral/{n}/{m}/{k}"));
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let x = Array2::from_shape_fn((n, m), |_| rng.random::<f64>() * 2.0 - 1.0);
                    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                    let ids = (0..n).map(|i| format!("r{i}")).collect();
                    let fm = FeatureMatrix::new(x, labels, k, ids).unwrap();
                    let profile = decompose(&fm).unwrap();
                    // Stop while the residual is still far above rounding level.
                    let eta_guess = 1.0 / profile.sigma_max_sq();
                    let initial = profile.predict_residual(eta_guess, 0).unwrap().total;
                    let mut t_max = 200;
                    while t_max > 10 && profile.predict_residual(eta_guess, t_max).unwrap().total < 1e-10 * initial {
                        t_max -= 10;
                    }
                    let cfg = TrainConfig {
                        max_iters: t_max,
                        eval_interval: 5,
                        seed,
                        form: GdForm::Auto,
                        ..TrainConfig::default()
                    };
                    let trace = train(&fm, &cfg, None, None).unwrap();
                    for c in &trace.checkpoints {
                        let pred = profile.predict_residual(trace.eta_used, c.t).unwrap();
                        let measured: f64 = c.loss;
                        let err = relative_error(pred.total, measured);
                        let deep = pred.total < 1e-6 * initial;
                        let tol = if deep { 1e-4 } else { 1e-6 };
                        if deep {
                            worst_deep = worst_deep.max(err);
                        } else {
                            worst_shallow = worst_shallow.max(err);
                        }
                        if err > tol {
                            failures.push(format!("N={n} m={m} K={k} t={}: {err:.2e}", c.t));
                        }
                        checkpoints += 1;
                    }
                    instances += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = failures.is_empty() && instances >= 20 && elapsed.as_secs() < 60;
    outcome(
        "spectral exactness",
        passed,
        format!(
            "{instances} instances, {checkpoints} checkpoints, max rel err {worst_shallow:.2e} (deep decay {worst_deep:.2e}), {:.1}s{}",
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

// ------------------------------------------------------------------ noisy-label dynamics fixture

const FIXTURE_ITERS: usize = 2000;

fn fixture_spec() -> PrototypeSpec {
    PrototypeSpec {
        num_classes: 10,
        height: 12,
        width: 12,
        channels: 3,
        grid: 4,
        variation: 0.3,
        pixel_noise: 0.5,
    }
}

struct NoisyRun {
    trace: TrainTrace<f32>,
    /// Checkpoint index where clean-subset accuracy first reaches 95%.
    clean95: Option<usize>,
    /// Checkpoint index where overall train accuracy first reaches 95%.
    all95: Option<usize>,
    early_stop: usize,
}

impl NoisyRun {
    fn t(&self, i: Option<usize>) -> Option<usize> {
        i.map(|i| self.trace.checkpoints[i].t)
    }

    fn holdout(&self, i: usize) -> f64 {
        self.trace.checkpoints[i].holdout_acc.unwrap()
    }

    fn final_holdout(&self) -> f64 {
        self.trace.last().holdout_acc.unwrap()
    }

    fn best_holdout(&self) -> f64 {
        self.holdout(early_stop_holdout(&self.trace).unwrap())
    }
}

fn noisy_run(seed: u64, structured: bool) -> NoisyRun {
    let protos = ClassPrototypes::new(fixture_spec(), derive_seed(seed, "prototypes")).unwrap();
    let train_set = protos.sample(200, "tr", Source::Candidate, derive_seed(seed, "train")).unwrap();
    let holdout = protos.sample(100, "ho", Source::Clean, derive_seed(seed, "holdout")).unwrap();
    let noise_seed = derive_seed(seed, "noise");
    let (noisy, _) = if structured {
        make_structured(&train_set, &NoiseSpec::structured(0.45, 20, 0.5, noise_seed), None).unwrap()
    } else {
        flip_uniform(&train_set, 0.45, noise_seed).unwrap()
    };
    let bank = make_filter_bank::<f32>(16, 3, 3, 10, derive_seed(seed, "featurizer")).unwrap();
    let x = featurize(&bank, &noisy).unwrap();
    let xh = featurize(&bank, &holdout).unwrap();
    let clean = clean_subset_indices(&noisy);
    let cfg = TrainConfig {
        max_iters: FIXTURE_ITERS,
        eval_interval: 10,
        seed,
        form: GdForm::Gram,
        max_snapshots: 2,
        ..TrainConfig::default()
    };
    let trace = train(&x, &cfg, Some(&clean), Some(&xh)).unwrap();
    let clean95 = trace.first_reaching(|c| c.clean_acc, 0.95);
    let all95 = trace.first_reaching(|c| Some(c.train_acc), 0.95);
    let early_stop = early_stop_clean(&trace, 0.95).unwrap();
    NoisyRun {
        trace,
        clean95,
        all95,
        early_stop,
    }
}

fn clean_before_noise(runs: &[NoisyRun], seconds: f64) -> Outcome {
    let ok = runs
        .iter()
        .filter(|r| matches!((r.clean95, r.all95), (Some(c), Some(a)) if c < a))
        .count();
    let pairs: Vec<String> = runs
        .iter()
        .map(|r| format!("{:?}/{:?}", r.t(r.clean95), r.t(r.all95)))
        .collect();
    outcome(
        "clean subset fitted before noisy labels",
        ok >= 9 && seconds < 300.0,
        format!("{ok}/10 seeds (t clean95/all95: {}), {seconds:.0}s", pairs.join(" ")),
    )
}

fn early_stopping_benefit(runs: &[NoisyRun]) -> Outcome {
    let ok = runs
        .iter()
        .filter(|r| r.holdout(r.early_stop) > r.final_holdout())
        .count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}>{:.3}", r.holdout(r.early_stop), r.final_holdout()))
        .collect();
    let min_train = runs.iter().map(|r| r.trace.last().train_acc).fold(1.0, f64::min);
    outcome(
        "early stopping beats the final iterate",
        ok >= 8,
        format!("{ok}/10 seeds (holdout early/final: {}), final train acc >= {min_train:.3}", detail.join(" ")),
    )
}

fn structured_vs_uniform(uniform: &[NoisyRun], structured: &[NoisyRun]) -> Outcome {
    let faster = uniform
        .iter()
        .zip(structured)
        .filter(|(u, s)| match (s.all95, u.all95) {
            (Some(s), Some(u)) => s < u,
            (Some(_), None) => true,
            _ => false,
        })
        .count();
    let drop = |r: &NoisyRun| r.best_holdout() - r.final_holdout();
    let gentler = uniform.iter().zip(structured).filter(|(u, s)| drop(s) < drop(u)).count();
    let mean = |rs: &[NoisyRun], f: &dyn Fn(&NoisyRun) -> f64| rs.iter().map(f).sum::<f64>() / rs.len() as f64;
    let t95 = |r: &NoisyRun| r.t(r.all95).map_or(f64::NAN, |t| t as f64);
    outcome(
        "structured noise is fitted faster and hurts less",
        faster >= 8 && gentler >= 8,
        format!(
            "faster {faster}/10 (mean t95 structured {:.0} vs uniform {:.0}), smaller drop {gentler}/10 (mean drop {:.3} vs {:.3})",
            mean(structured, &t95),
            mean(uniform, &t95),
            mean(structured, &drop),
            mean(uniform, &drop)
        ),
    )
}

// ------------------------------------------------------------------ mixing trend

fn mixing_trend() -> Outcome {
    let settings = [(0.0, 1usize), (0.25, 1), (0.5, 1), (0.75, 1), (0.75, 10)];
    let mut sums = [0.0f64; 5];
    let seeds = 5u64;
    for seed in 0..seeds {
        let protos = ClassPrototypes::new(fixture_spec(), derive_seed(seed, "mix/prototypes")).unwrap();
        let clean = protos.sample(20, "c", Source::Clean, derive_seed(seed, "mix/clean")).unwrap();
        let pool = protos.sample(200, "n", Source::Candidate, derive_seed(seed, "mix/pool")).unwrap();
        let (noisy, _) = flip_uniform(&pool, 0.45, derive_seed(seed, "mix/noise")).unwrap();
        let holdout = protos.sample(100, "h", Source::Clean, derive_seed(seed, "mix/holdout")).unwrap();
        let bank = make_filter_bank::<f32>(16, 3, 3, 10, derive_seed(seed, "mix/featurizer")).unwrap();
        let xh = featurize(&bank, &holdout).unwrap();
        for (slot, &(f, r)) in settings.iter().enumerate() {
            let mixed = mix(&clean, &noisy, f, r, derive_seed(seed, "mix")).unwrap();
            let x = featurize(&bank, &mixed).unwrap();
            let cfg = TrainConfig {
                max_iters: 300,
                eval_interval: 10,
                seed,
                form: GdForm::Gram,
                max_snapshots: 2,
                ..TrainConfig::default()
            };
            let trace = train(&x, &cfg, None, Some(&xh)).unwrap();
            let best = early_stop_holdout(&trace).unwrap();
            sums[slot] += trace.checkpoints[best].holdout_acc.unwrap();
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / seeds as f64).collect();
    let monotone = means[..4].windows(2).all(|w| w[1] <= w[0]);
    let gain = means[4] - means[3];
    outcome(
        "mixing trend",
        monotone && gain >= 0.02,
        format!(
            "mean best holdout r=1: f=0 {:.3}, 0.25 {:.3}, 0.5 {:.3}, 0.75 {:.3}; f=0.75 r=10 {:.3} (gain {:+.3})",
            means[0], means[1], means[2], means[3], means[4], gain
        ),
    )
}

// ------------------------------------------------------------------ featurizer dimension

fn featurizer_dimension() -> Outcome {
    let bank = make_filter_bank::<f32>(4000, 6, 3, 3, 0).unwrap();
    let img = Image::new(32, 32, 3, (0..32 * 32 * 3).map(|i| (i * 7 % 256) as u8).collect()).unwrap();
    let produced = bank.features(&img).unwrap().len();
    outcome(
        "featurizer dimension law",
        bank.feature_dim() == 72_000 && produced == 72_000,
        format!("declared m = {}, produced {produced} features", bank.feature_dim()),
    )
}

// ------------------------------------------------------------------ dedup oracle

fn oracle_l2(a: &[u8], b: &[u8]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

fn oracle_ssim(a: &Image, b: &Image) -> f64 {
    let gray = |img: &Image| -> Vec<f64> {
        img.as_bytes()
            .chunks(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    };
    let (x, y) = (gray(a), gray(b));
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cxy = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn dedup_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let random_image = |rng: &mut ChaCha8Rng| {
        Image::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.random()).collect()).unwrap()
    };
    let test_imgs: Vec<Image> = (0..50).map(|_| random_image(&mut rng)).collect();
    let mut train_imgs: Vec<Image> = (0..2000).map(|_| random_image(&mut rng)).collect();
    let mut exact = Vec::new();
    for i in 0..5 {
        let slot = 100 + 379 * i;
        train_imgs[slot] = test_imgs[i].clone();
        exact.push((format!("test{i:02}"), format!("train{slot:04}")));
    }
    for i in 5..10 {
        let slot = 50 + 200 * i;
        let mut bytes = test_imgs[i].as_bytes().to_vec();
        for b in bytes.iter_mut() {
            *b = b.saturating_add(rng.random_range(0..4)).saturating_sub(rng.random_range(0..4));
        }
        train_imgs[slot] = Image::new(32, 32, 3, bytes).unwrap();
    }
    let as_set = |imgs: Vec<Image>, prefix: &str| {
        let records = imgs
            .into_iter()
            .enumerate()
            .map(|(i, img)| ImageRecord::new(format!("{prefix}{i:0w$}", w = if prefix == "test" { 2 } else { 4 }), img, 0))
            .collect();
        CandidateDataset::with_num_classes(records, 1, 0).unwrap()
    };
    let test = as_set(test_imgs, "test");
    let train = as_set(train_imgs, "train");
    let k = 100;
    let pairs = scan(&test, &train, k).unwrap();

    let mut mismatches = 0;
    for t in test.records() {
        let mut by_l2: Vec<(f64, usize)> = train
            .records()
            .iter()
            .enumerate()
            .map(|(j, r)| (oracle_l2(t.pixels.as_bytes(), r.pixels.as_bytes()), j))
            .collect();
        by_l2.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut by_ssim: Vec<(f64, usize)> = train
            .records()
            .iter()
            .enumerate()
            .map(|(j, r)| (oracle_ssim(&t.pixels, &r.pixels), j))
            .collect();
        by_ssim.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

        let mine: Vec<&SimilarityPair> = pairs.iter().filter(|p| p.test_id == t.id).collect();
        let ranked = |rank: fn(&SimilarityPair) -> Option<usize>| {
            let mut v: Vec<(usize, &str)> = mine.iter().filter_map(|p| rank(p).map(|r| (r, p.train_id.as_str()))).collect();
            v.sort();
            v.into_iter().map(|(_, id)| id.to_string()).collect::<Vec<_>>()
        };
        let expect = |list: &[(f64, usize)]| -> Vec<String> {
            list[..k].iter().map(|&(_, j)| train.records()[j].id.clone()).collect()
        };
        if ranked(|p| p.rank_l2) != expect(&by_l2) || ranked(|p| p.rank_ssim) != expect(&by_ssim) {
            mismatches += 1;
        }
    }
    let flagged = auto_flag(&pairs);
    let expected_flags: Vec<String> = exact.iter().map(|(t, r)| format!("{t}|{r}")).collect();
    let true_flags = expected_flags.iter().filter(|id| flagged.contains(id)).count();
    let false_flags = flagged.len() - true_flags;
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        "dedup oracle equivalence",
        mismatches == 0 && true_flags == 5 && false_flags == 0 && elapsed < 120.0,
        format!(
            "{} pairs, {mismatches}/50 neighbour lists differ from brute force, {true_flags}/5 exact copies flagged, {false_flags} false flags, {elapsed:.1}s",
            pairs.len()
        ),
    )
}

// ------------------------------------------------------------------ Clopper-Pearson

fn clopper_pearson_checks() -> Outcome {
    let mut worst = 0.0f64;
    let mut exact_ends = true;
    for n in [1usize, 5, 10, 20, 30, 100, 1000] {
        for alpha in [0.01, 0.05, 0.1] {
            let (lo0, hi0) = clopper_pearson(0, n, alpha).unwrap();
            let (lon, hin) = clopper_pearson(n, n, alpha).unwrap();
            let closed = (alpha / 2.0f64).powf(1.0 / n as f64);
            exact_ends &= lo0 == 0.0 && hin == 1.0;
            worst = worst.max((hi0 - (1.0 - closed)).abs()).max((lon - closed).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let dist = Binomial::new(30, 0.5).unwrap();
    let covered = (0..2000)
        .filter(|_| {
            let (lo, hi) = clopper_pearson(dist.sample(&mut rng) as usize, 30, 0.05).unwrap();
            lo <= 0.5 && 0.5 <= hi
        })
        .count();
    let coverage = covered as f64 / 2000.0;
    outcome(
        "Clopper-Pearson correctness",
        exact_ends && worst <= 1e-9 && coverage >= 0.93,
        format!("closed-form max deviation {worst:.1e}, coverage {coverage:.3} at n = 30, p = 0.5"),
    )
}

// ------------------------------------------------------------------ CLI determinism

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lnlab"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn experiment_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |rel: &str| d.join(rel).to_str().unwrap().to_string();
    let attempt = || -> Result<(Vec<u8>, Vec<u8>), String> {
        for (name, per_class, source) in [("clean", "20", "clean"), ("noisy", "200", "candidate"), ("holdout", "20", "clean")] {
            run_cli(&[
                "synth", "--seed", "7", "--out", &p(name), "--per-class", per_class, "--classes", "10", "--prefix", name,
                "--source", source,
            ])?;
        }
        fs::write(
            d.join("exp.json"),
            r#"{"seed": 42, "clean_manifest": "clean/manifest.jsonl", "noisy_manifest": "noisy/manifest.jsonl",
                "holdout_manifest": "holdout/manifest.jsonl", "noise": {"kind": "uniform_flip", "rate": 0.45},
                "bank": {"num_filters": 8, "kernel": 3, "pool_grid": 5}, "dedup": {"k": 10},
                "train": {"max_iters": 60, "eval_interval": 10},
                "mixing": {"fractions": [0, 0.25, 0.5, 0.75, 1], "ratios": [1, 10]},
                "early_stopping": {"rule": "clean", "tau": 0.95}}"#,
        )
        .map_err(|e| e.to_string())?;
        run_cli(&["experiment", "--config", &p("exp.json"), "--out", &p("run1")])?;
        run_cli(&["experiment", "--config", &p("exp.json"), "--out", &p("run2")])?;
        let read = |rel: &str| fs::read(Path::new(&p(rel))).map_err(|e| e.to_string());
        Ok((read("run1/summary.csv")?, read("run2/summary.csv")?))
    };
    match attempt() {
        Ok((a, b)) => {
            let rows = a.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
            outcome(
                "experiment determinism",
                a == b && rows == 10,
                format!("{rows} summary rows, {} bytes, identical: {}", a.len(), a == b),
            )
        }
        Err(e) => outcome("experiment determinism", false, format!("run failed: {e}")),
    }
}

fn main() {
    let start = Instant::now();
    let mut results = vec![spectral_exactness(), featurizer_dimension(), clopper_pearson_checks(), dedup_oracle()];

    let fixture_start = Instant::now();
    let uniform: Vec<NoisyRun> = (0..10).map(|s| noisy_run(s, false)).collect();
    let uniform_secs = fixture_start.elapsed().as_secs_f64();
    results.push(clean_before_noise(&uniform, uniform_secs));
    results.push(early_stopping_benefit(&uniform));
    let structured: Vec<NoisyRun> = (0..10).map(|s| noisy_run(s, true)).collect();
    results.push(structured_vs_uniform(&uniform, &structured));

    results.push(mixing_trend());
    results.push(experiment_determinism());

    let failed: Vec<&Outcome> = results.iter().filter(|r| !r.passed).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        for f in &failed {
            eprintln!("failed: {} ({})", f.name, f.detail);
        }
        std::process::exit(1);
    }
}
