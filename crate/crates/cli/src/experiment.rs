use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use lnlab_core::dataset::CandidateDataset;
use lnlab_core::dedup::{self, PairsHeader};
use lnlab_core::featurizer::{featurize, FeatureMatrix, FilterBankSpec, RandomFilterBank};
use lnlab_core::noise::{flip_uniform, make_structured, mix, NoiseKind};
use lnlab_core::trainer::{early_stop_clean, early_stop_holdout, train};
use ndarray::{concatenate, Axis};
use serde::Serialize;

use crate::commands::{load_dataset, write_json, write_trace};
use crate::config::{Ctx, ExperimentConfig, StopRule};
use crate::lock::OutputLock;

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Clean (human-verified) set manifest.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    /// Noisy candidate set manifest.
    #[arg(long)]
    pub noisy: Option<PathBuf>,
    /// Holdout manifest used for accuracy tracking.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub rule: Option<StopRule>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
}

/// One row of `summary.csv`.
#[derive(Serialize)]
struct SummaryRow {
    fraction: f64,
    ratio: usize,
    n_train: usize,
    n_clean: usize,
    rule: &'static str,
    selected_t: usize,
    selected_holdout_acc: f64,
    best_t: usize,
    best_holdout_acc: f64,
    final_t: usize,
    final_holdout_acc: f64,
    final_train_acc: f64,
}

fn required(p: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let p = p
        .clone()
        .with_context(|| format!("experiment needs {name} (flag or config field)"))?;
    ensure!(p.exists(), "{name} {} does not exist", p.display());
    Ok(p)
}

fn stack(parts: &[(&FeatureMatrix<f32>, Vec<usize>)], ds: &CandidateDataset) -> Result<FeatureMatrix<f32>> {
    let blocks: Vec<_> = parts.iter().map(|(fm, rows)| fm.x().select(Axis(0), rows)).collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let x = concatenate(Axis(0), &views)?;
    let ids = ds.records().iter().map(|r| r.id.clone()).collect();
    Ok(FeatureMatrix::new(x, ds.labels(), ds.num_classes(), ids)?)
}

fn row_index(fm: &FeatureMatrix<f32>) -> HashMap<&str, usize> {
    fm.record_ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

fn remove_exact_copies(
    holdout: &CandidateDataset,
    set: &CandidateDataset,
    k: usize,
    name: &str,
    out: &Path,
) -> Result<CandidateDataset> {
    let pairs = dedup::scan(holdout, set, k)?;
    let mut w = BufWriter::new(File::create(out.join(format!("pairs_{name}.jsonl")))?);
    dedup::write_pairs(&mut w, &PairsHeader::new(k), &pairs)?;
    // Fixed timestamp keeps the outputs reproducible.
    let decisions = dedup::auto_decisions(&pairs, 0);
    let (cleaned, removals) = dedup::apply_decisions(set, &pairs, &decisions)?;
    let w = BufWriter::new(File::create(out.join(format!("removals_{name}.jsonl")))?);
    dedup::write_jsonl(w, &removals)?;
    if !removals.is_empty() {
        log::info!("removed {} exact holdout copies from the {name} set", removals.len());
    }
    Ok(cleaned)
}

fn effective_config(ctx: &Ctx, a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = ctx.cfg.clone();
    cfg.seed = ctx.seed;
    if let Some(p) = &a.clean {
        cfg.clean_manifest = Some(p.clone());
    }
    if let Some(p) = &a.noisy {
        cfg.noisy_manifest = Some(p.clone());
    }
    if let Some(p) = &a.holdout {
        cfg.holdout_manifest = Some(p.clone());
    }
    if let Some(r) = a.rule {
        cfg.early_stopping.rule = r;
    }
    if let Some(t) = a.tau {
        cfg.early_stopping.tau = t;
    }
    if let Some(i) = a.iters {
        cfg.train.max_iters = i;
    }
    cfg.train.seed = ctx.derived("trainer");
    cfg.train.validate()?;
    if cfg.mixing.fractions.is_empty() || cfg.mixing.ratios.is_empty() {
        bail!("mixing needs at least one fraction and one ratio");
    }
    Ok(cfg)
}

pub fn run(ctx: &Ctx, a: ExperimentArgs) -> Result<()> {
    let cfg = effective_config(ctx, &a)?;
    let clean_path = required(&cfg.clean_manifest, "clean manifest")?;
    let noisy_path = required(&cfg.noisy_manifest, "noisy manifest")?;
    let holdout_path = required(&cfg.holdout_manifest, "holdout manifest")?;
    let out = ctx.out_dir()?.to_path_buf();
    let _lock = OutputLock::acquire(&out)?;
    write_json(&out.join("config.json"), &cfg)?;

    let mut clean = load_dataset(&clean_path)?;
    let mut noisy = load_dataset(&noisy_path)?;
    let holdout = load_dataset(&holdout_path)?;
    ensure!(
        clean.image_shape() == noisy.image_shape() && clean.image_shape() == holdout.image_shape(),
        "clean, noisy and holdout images must share one shape"
    );
    ensure!(
        clean.num_classes() == noisy.num_classes() && clean.num_classes() == holdout.num_classes(),
        "clean, noisy and holdout sets must share one label space"
    );

    if let Some(spec) = &cfg.noise {
        let mut spec = spec.clone();
        spec.seed = ctx.derived("noise");
        let (injected, ledger) = match spec.kind {
            NoiseKind::UniformFlip => flip_uniform(&noisy, spec.rate, spec.seed)?,
            NoiseKind::Structured => make_structured(&noisy, &spec, None)?,
        };
        let mut w = BufWriter::new(File::create(out.join("noise_ledger.jsonl"))?);
        ledger.write_jsonl(&mut w)?;
        w.flush()?;
        noisy = injected;
    }
    if let Some(d) = cfg.dedup {
        clean = remove_exact_copies(&holdout, &clean, d.k, "clean", &out)?;
        noisy = remove_exact_copies(&holdout, &noisy, d.k, "noisy", &out)?;
    }

    let (_, _, channels) = clean.image_shape().context("clean set is empty")?;
    let bank = RandomFilterBank::<f32>::from_spec(FilterBankSpec {
        seed: ctx.derived("featurizer"),
        num_filters: cfg.bank.num_filters,
        kernel: cfg.bank.kernel,
        channels,
        pool_grid: cfg.bank.pool_grid,
    })?;
    write_json(&out.join("bank.json"), &bank.spec())?;
    let clean_x = featurize(&bank, &clean)?;
    let noisy_x = featurize(&bank, &noisy)?;
    let holdout_x = featurize(&bank, &holdout)?;
    let clean_rows = row_index(&clean_x);
    let noisy_rows = row_index(&noisy_x);

    let runs = out.join("runs");
    let mut summary = csv::Writer::from_writer(Vec::new());
    for &f in &cfg.mixing.fractions {
        for &r in &cfg.mixing.ratios {
            let mixed = mix(&clean, &noisy, f, r, ctx.derived("mix"))
                .with_context(|| format!("mixing f = {f}, r = {r}"))?;
            let mut from_clean = Vec::new();
            let mut from_noisy = Vec::new();
            for rec in mixed.records() {
                match clean_rows.get(rec.id.as_str()) {
                    Some(&i) => from_clean.push(i),
                    None => from_noisy.push(noisy_rows[rec.id.as_str()]),
                }
            }
            let n_clean = from_clean.len();
            let features = stack(&[(&clean_x, from_clean), (&noisy_x, from_noisy)], &mixed)?;
            let clean_idx: Vec<usize> = (0..n_clean).collect();
            let trace = train(&features, &cfg.train, Some(&clean_idx), Some(&holdout_x))
                .with_context(|| format!("training f = {f}, r = {r}"))?;

            let run_dir = runs.join(format!("f{f}_r{r}"));
            fs::create_dir_all(&run_dir)?;
            write_trace(&trace, &run_dir)?;

            let (rule, selected) = match cfg.early_stopping.rule {
                StopRule::Clean if n_clean > 0 => ("clean", early_stop_clean(&trace, cfg.early_stopping.tau)?),
                _ => ("holdout", early_stop_holdout(&trace)?),
            };
            let best = early_stop_holdout(&trace)?;
            let acc = |i: usize| trace.checkpoints[i].holdout_acc.unwrap_or(0.0);
            let last = trace.checkpoints.len() - 1;
            summary.serialize(SummaryRow {
                fraction: f,
                ratio: r,
                n_train: features.n(),
                n_clean,
                rule,
                selected_t: trace.checkpoints[selected].t,
                selected_holdout_acc: acc(selected),
                best_t: trace.checkpoints[best].t,
                best_holdout_acc: acc(best),
                final_t: trace.checkpoints[last].t,
                final_holdout_acc: acc(last),
                final_train_acc: trace.checkpoints[last].train_acc,
            })?;
        }
    }
    let bytes = summary.into_inner()?;
    fs::write(out.join("summary.csv"), &bytes)?;
    print!("{}", String::from_utf8(bytes)?);
    Ok(())
}
