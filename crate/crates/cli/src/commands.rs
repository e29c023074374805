use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{ensure, Context, Result};
use clap::{Args, Subcommand};
use lnlab_core::dataset::{clean_subset_indices, ingest_manifest, write_manifest, CandidateDataset, Source};
use lnlab_core::dedup::{self, PairsHeader, SimilarityPair};
use lnlab_core::dynamics::{compare_with_trace, decompose_capped, DEFAULT_MAX_ROWS};
use lnlab_core::featurizer::{featurize, FeatureMatrix, FilterBankSpec, RandomFilterBank};
use lnlab_core::noise::{flip_uniform, make_structured, mix, NoiseLedger, NoiseSpec};
use lnlab_core::report::{evaluate, write_learning_curve_csv};
use lnlab_core::synth::{ClassPrototypes, PrototypeSpec};
use lnlab_core::trainer::{
    early_stop_clean, early_stop_holdout, load_weights, save_weights, train, GdForm, StepSize, TrainConfig, TrainTrace,
};
use lnlab_review::{AppState, ReviewSession, SystemClock, DEFAULT_PORT};
use serde_json::json;

use crate::config::Ctx;
use crate::lock::OutputLock;
use crate::{experiment, Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Featurize(a) => featurize_cmd(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Dynamics(a) => dynamics(&ctx, a),
        Command::Noise(c) => noise(&ctx, c),
        Command::Dedup(c) => dedup_cmd(&ctx, c),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Experiment(a) => experiment::run(&ctx, a),
    }
}

pub(crate) fn load_dataset(path: &Path) -> Result<CandidateDataset> {
    ingest_manifest(path).with_context(|| format!("ingesting {}", path.display()))
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn summary(ds: &CandidateDataset) -> serde_json::Value {
    let shape = ds.image_shape();
    json!({
        "records": ds.len(),
        "num_classes": ds.num_classes(),
        "class_names": ds.class_names(),
        "class_counts": ds.class_counts(),
        "image_shape": shape.map(|(h, w, c)| [h, w, c]),
        "clean_flagged": clean_subset_indices(ds).len(),
    })
}

// ---------------------------------------------------------------- ingest

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Manifest (JSONL) to validate.
    #[arg(long)]
    pub manifest: PathBuf,
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<()> {
    let ds = load_dataset(&a.manifest)?;
    let s = summary(&ds);
    if let Some(out) = &ctx.out {
        let _lock = OutputLock::acquire(out)?;
        write_json(&out.join("dataset_summary.json"), &s)?;
    }
    println!("{s}");
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 12)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.3)]
    pub variation: f64,
    #[arg(long, default_value_t = 0.5)]
    pub pixel_noise: f64,
    /// Record id prefix; also names the sampling stream, so sets with different
    /// prefixes drawn under one seed are independent.
    #[arg(long, default_value = "s")]
    pub prefix: String,
    #[arg(long, value_parser = parse_source, default_value = "clean")]
    pub source: Source,
}

fn parse_source(s: &str) -> Result<Source, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown source {s:?} (clean, candidate, synthetic)"))
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let out = ctx.out_dir()?;
    let _lock = OutputLock::acquire(out)?;
    let spec = PrototypeSpec {
        num_classes: a.classes,
        height: a.size,
        width: a.size,
        channels: a.channels,
        variation: a.variation,
        pixel_noise: a.pixel_noise,
        ..PrototypeSpec::default()
    };
    let protos = ClassPrototypes::new(spec, ctx.derived("prototypes"))?;
    let ds = protos.sample(a.per_class, &a.prefix, a.source, ctx.derived(&format!("sample/{}", a.prefix)))?;
    let manifest = write_manifest(&ds, out)?;
    println!("{}", json!({ "manifest": manifest, "records": ds.len() }));
    Ok(())
}

// ---------------------------------------------------------------- featurize

#[derive(Args, Debug)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Reuse a saved filter bank (bank.json) instead of drawing a new one.
    #[arg(long, conflicts_with_all = ["filters", "kernel", "pool"])]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub pool: Option<usize>,
}

pub(crate) fn load_bank(path: &Path) -> Result<RandomFilterBank<f32>> {
    let spec: FilterBankSpec = serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(RandomFilterBank::from_spec(spec)?)
}

fn featurize_cmd(ctx: &Ctx, a: FeaturizeArgs) -> Result<()> {
    let out = ctx.out_dir()?;
    let _lock = OutputLock::acquire(out)?;
    let ds = load_dataset(&a.manifest)?;
    let (_, _, channels) = ds.image_shape().context("dataset is empty")?;
    let bank = match &a.bank {
        Some(p) => load_bank(p)?,
        None => {
            let b = ctx.cfg.bank;
            RandomFilterBank::from_spec(FilterBankSpec {
                seed: ctx.derived("featurizer"),
                num_filters: a.filters.unwrap_or(b.num_filters),
                kernel: a.kernel.unwrap_or(b.kernel),
                channels,
                pool_grid: a.pool.unwrap_or(b.pool_grid),
            })?
        }
    };
    let features = featurize(&bank, &ds)?;
    features.save(&out.join("features.rfmx"))?;
    write_json(&out.join("bank.json"), &bank.spec())?;
    println!("{}", json!({ "n": features.n(), "m": features.m(), "k": features.k() }));
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training features (RFMX).
    #[arg(long)]
    pub features: PathBuf,
    /// Holdout features (RFMX) tracked at every checkpoint.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Manifest whose `clean` flags define the clean subset, matched by record id.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// `auto` (1/σ_max²) or a positive number.
    #[arg(long)]
    pub step_size: Option<StepSize>,
    #[arg(long)]
    pub max_snapshots: Option<usize>,
    /// Accuracy threshold for the clean-subset stopping rule.
    #[arg(long)]
    pub tau: Option<f64>,
}

fn clean_indices_by_id(features: &FeatureMatrix<f32>, manifest: &Path) -> Result<Vec<usize>> {
    let ds = load_dataset(manifest)?;
    let clean: HashSet<&str> = clean_subset_indices(&ds)
        .into_iter()
        .map(|i| ds.records()[i].id.as_str())
        .collect();
    Ok(features
        .record_ids()
        .iter()
        .enumerate()
        .filter(|(_, id)| clean.contains(id.as_str()))
        .map(|(i, _)| i)
        .collect())
}

pub(crate) fn write_trace(trace: &TrainTrace<f32>, dir: &Path) -> Result<()> {
    let mut w = create(&dir.join("trace.jsonl"))?;
    trace.write_jsonl(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("learning_curve.csv"))?;
    write_learning_curve_csv(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let out = ctx.out_dir()?;
    let _lock = OutputLock::acquire(out)?;
    let features = FeatureMatrix::<f32>::load(&a.features)?;
    let holdout = a.holdout.as_deref().map(FeatureMatrix::<f32>::load).transpose()?;
    let clean = a.manifest.as_deref().map(|m| clean_indices_by_id(&features, m)).transpose()?;

    let mut cfg: TrainConfig = ctx.cfg.train.clone();
    cfg.seed = ctx.derived("trainer");
    if let Some(v) = a.iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.eval_interval {
        cfg.eval_interval = v;
    }
    if let Some(v) = a.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = a.max_snapshots {
        cfg.max_snapshots = v;
    }
    let tau = a.tau.unwrap_or(ctx.cfg.early_stopping.tau);

    let trace = train(&features, &cfg, clean.as_deref(), holdout.as_ref())?;
    write_trace(&trace, out)?;
    let snaps = out.join("snapshots");
    fs::create_dir_all(&snaps)?;
    for s in &trace.snapshots {
        save_weights(s.z.view(), &snaps.join(format!("t{:08}.rfwz", s.t)))?;
    }
    let last = trace.snapshots.last().expect("the final iterate is always kept");
    save_weights(last.z.view(), &out.join("weights.rfwz"))?;

    let pick = |i: usize| {
        let c = &trace.checkpoints[i];
        json!({ "t": c.t, "train_acc": c.train_acc, "clean_acc": c.clean_acc, "holdout_acc": c.holdout_acc })
    };
    let clean_stop = clean.as_ref().filter(|c| !c.is_empty()).map(|_| early_stop_clean(&trace, tau)).transpose()?;
    let holdout_stop = holdout.as_ref().map(|_| early_stop_holdout(&trace)).transpose()?;
    let report = json!({
        "config": cfg,
        "eta": trace.eta_used,
        "sigma_max_sq": trace.sigma_max_sq,
        "clean_records": clean.as_ref().map(Vec::len),
        "final": pick(trace.checkpoints.len() - 1),
        "early_stop_clean": clean_stop.map(pick),
        "early_stop_holdout": holdout_stop.map(pick),
    });
    write_json(&out.join("train_summary.json"), &report)?;
    println!("{report}");
    Ok(())
}

// ---------------------------------------------------------------- dynamics

#[derive(Args, Debug)]
pub struct DynamicsArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// `auto` (1/σ_max²) or a positive step size.
    #[arg(long, default_value = "auto")]
    pub eta: StepSize,
    /// Comma-separated iteration counts to compare at.
    #[arg(long, value_delimiter = ',', default_value = "0,1,10,100")]
    pub t: Vec<usize>,
    /// Row cap for the eigendecomposition.
    #[arg(long, default_value_t = DEFAULT_MAX_ROWS)]
    pub max_rows: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn dynamics(ctx: &Ctx, a: DynamicsArgs) -> Result<()> {
    let features = FeatureMatrix::<f32>::load(&a.features)?.cast::<f64>();
    ensure!(
        features.n() <= a.max_rows,
        "{} rows exceed --max-rows {}; the comparison needs the full Gram spectrum",
        features.n(),
        a.max_rows
    );
    let mut ts = a.t.clone();
    ts.sort_unstable();
    ts.dedup();
    let t_max = ts.last().copied().unwrap_or(0).max(1);
    let interval = ts.iter().copied().filter(|&t| t > 0).fold(0, gcd).max(1);
    let cfg = TrainConfig {
        step_size: a.eta,
        max_iters: t_max,
        eval_interval: interval,
        seed: ctx.derived("trainer"),
        max_snapshots: 2,
        form: GdForm::Auto,
        ..TrainConfig::default()
    };
    let trace = train(&features, &cfg, None, None)?;
    let profile = decompose_capped(&features, a.max_rows)?;
    let wanted: HashSet<usize> = ts.iter().copied().collect();
    let rows: Vec<_> = compare_with_trace(&profile, &trace)?
        .into_iter()
        .filter(|c| wanted.contains(&c.t))
        .collect();

    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["t", "predicted", "measured", "rel_error"])?;
    let mut max_rel = 0.0f64;
    for r in &rows {
        let p: f64 = r.predicted.iter().sum();
        let m: f64 = r.measured.iter().sum();
        max_rel = max_rel.max(r.max_rel_error);
        table.write_record([r.t.to_string(), format!("{p:.12e}"), format!("{m:.12e}"), format!("{:.3e}", r.max_rel_error)])?;
    }
    let table = String::from_utf8(table.into_inner()?)?;
    if let Some(out) = &ctx.out {
        let _lock = OutputLock::acquire(out)?;
        fs::write(out.join("dynamics.csv"), &table)?;
        let mut w = create(&out.join("spectrum.json"))?;
        profile.write_json(&mut w)?;
        w.flush()?;
    }
    print!("{table}");
    eprintln!(
        "{}",
        json!({ "eta": trace.eta_used, "sigma_max_sq": profile.sigma_max_sq(), "max_rel_error": max_rel })
    );
    Ok(())
}

// ---------------------------------------------------------------- noise

#[derive(Subcommand, Debug)]
pub enum NoiseCommand {
    /// Flip a fixed fraction of every class to uniformly random other classes.
    Flip(FlipArgs),
    /// Coherent wrong labels shared by groups, optionally with distractor images.
    Structured(StructuredArgs),
    /// Replace part of a clean set with noisy records.
    Mix(MixArgs),
}

#[derive(Args, Debug)]
pub struct FlipArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub rate: f64,
}

#[derive(Args, Debug)]
pub struct StructuredArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub rate: f64,
    #[arg(long, default_value_t = 1)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.0)]
    pub ood_fraction: f64,
    /// Distractor manifest whose labels are theme indices.
    #[arg(long)]
    pub pool: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MixArgs {
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub noisy: PathBuf,
    /// Fraction f of the clean set to remove.
    #[arg(long)]
    pub fraction: f64,
    /// Noisy records added per removed clean record.
    #[arg(long)]
    pub ratio: usize,
}

fn write_noisy(out: &Path, ds: &CandidateDataset, ledger: Option<&NoiseLedger>) -> Result<()> {
    write_manifest(ds, out)?;
    if let Some(ledger) = ledger {
        let mut w = create(&out.join("ledger.jsonl"))?;
        ledger.write_jsonl(&mut w)?;
        w.flush()?;
    }
    println!("{}", summary(ds));
    Ok(())
}

fn noise(ctx: &Ctx, c: NoiseCommand) -> Result<()> {
    let out = ctx.out_dir()?;
    let _lock = OutputLock::acquire(out)?;
    match c {
        NoiseCommand::Flip(a) => {
            let ds = load_dataset(&a.manifest)?;
            let (noisy, ledger) = flip_uniform(&ds, a.rate, ctx.derived("noise"))?;
            write_noisy(out, &noisy, Some(&ledger))
        }
        NoiseCommand::Structured(a) => {
            let ds = load_dataset(&a.manifest)?;
            let pool = a.pool.as_deref().map(load_dataset).transpose()?;
            let spec = NoiseSpec::structured(a.rate, a.clusters, a.ood_fraction, ctx.derived("noise"));
            let (noisy, ledger) = make_structured(&ds, &spec, pool.as_ref())?;
            write_noisy(out, &noisy, Some(&ledger))
        }
        NoiseCommand::Mix(a) => {
            let clean = load_dataset(&a.clean)?;
            let noisy = load_dataset(&a.noisy)?;
            let mixed = mix(&clean, &noisy, a.fraction, a.ratio, ctx.derived("mix"))?;
            write_noisy(out, &mixed, None)
        }
    }
}

// ---------------------------------------------------------------- dedup

#[derive(Subcommand, Debug)]
pub enum DedupCommand {
    /// Exact k-nearest-neighbour search of test images among train images.
    Scan(ScanArgs),
    /// Record `similar` decisions for exact copies.
    AutoFlag(AutoFlagArgs),
    /// Drop train records judged similar; writes the cleaned dataset.
    Apply(ApplyArgs),
    /// Serve the review API (and UI) over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct ScanArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AutoFlagArgs {
    #[arg(long)]
    pub pairs: PathBuf,
}

#[derive(Args, Debug)]
pub struct ApplyArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub decisions: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Decision log; defaults to `<out>/decisions.jsonl`.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Directory with the built review UI, served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

pub(crate) fn read_pairs(path: &Path) -> Result<Vec<SimilarityPair>> {
    Ok(dedup::read_pairs(open(path)?).with_context(|| format!("reading {}", path.display()))?.1)
}

fn now_millis() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

fn dedup_cmd(ctx: &Ctx, c: DedupCommand) -> Result<()> {
    let out = ctx.out_dir()?;
    let _lock = OutputLock::acquire(out)?;
    match c {
        DedupCommand::Scan(a) => {
            let test = load_dataset(&a.test)?;
            let train = load_dataset(&a.train)?;
            let k = a.k.or(ctx.cfg.dedup.map(|d| d.k)).unwrap_or(100);
            let pairs = dedup::scan(&test, &train, k)?;
            let mut w = create(&out.join("pairs.jsonl"))?;
            dedup::write_pairs(&mut w, &PairsHeader::new(k), &pairs)?;
            w.flush()?;
            let exact = pairs.iter().filter(|p| p.is_exact_copy()).count();
            println!("{}", json!({ "pairs": pairs.len(), "exact_copies": exact }));
        }
        DedupCommand::AutoFlag(a) => {
            let pairs = read_pairs(&a.pairs)?;
            let decisions = dedup::auto_decisions(&pairs, now_millis());
            let path = out.join("decisions.jsonl");
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            dedup::write_jsonl(BufWriter::new(file), &decisions)?;
            println!("{}", json!({ "flagged": decisions.iter().map(|d| &d.pair_id).collect::<Vec<_>>() }));
        }
        DedupCommand::Apply(a) => {
            let train = load_dataset(&a.train)?;
            let pairs = read_pairs(&a.pairs)?;
            let decisions = dedup::read_decisions(open(&a.decisions)?)?;
            let (cleaned, removals) = dedup::apply_decisions(&train, &pairs, &decisions)?;
            write_manifest(&cleaned, out)?;
            let mut w = create(&out.join("removals.jsonl"))?;
            dedup::write_jsonl(&mut w, &removals)?;
            println!("{}", json!({ "kept": cleaned.len(), "removed": removals.len() }));
        }
        DedupCommand::Serve(a) => {
            let test = load_dataset(&a.test)?;
            let train = load_dataset(&a.train)?;
            let pairs = read_pairs(&a.pairs)?;
            let log = a.decisions.unwrap_or_else(|| out.join("decisions.jsonl"));
            let session = ReviewSession::open(pairs, &log, Arc::new(SystemClock::default()))?;
            let images: HashMap<_, _> = test
                .into_records()
                .into_iter()
                .chain(train.into_records())
                .map(|r| (r.id, r.pixels))
                .collect();
            let state = Arc::new(AppState {
                session,
                images,
                ui_dir: a.ui_dir,
            });
            let addr = SocketAddr::new(a.host, a.port);
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(lnlab_review::serve(state, addr))
                .with_context(|| format!("serving on {addr}"))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Weight matrix (RFWZ), e.g. a training snapshot.
    #[arg(long)]
    pub weights: PathBuf,
    /// Filter bank spec written by `featurize`.
    #[arg(long)]
    pub bank: PathBuf,
    /// Test set manifest.
    #[arg(long)]
    pub manifest: PathBuf,
}

fn evaluate_cmd(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let z = load_weights::<f32>(&a.weights)?;
    let bank = load_bank(&a.bank)?;
    let test = load_dataset(&a.manifest)?;
    let result = evaluate(z.view(), &bank, &test)?;
    if let Some(out) = &ctx.out {
        let _lock = OutputLock::acquire(out)?;
        let mut w = create(&out.join("eval.json"))?;
        result.write_json(&mut w)?;
        w.flush()?;
        let mut w = create(&out.join("per_class.csv"))?;
        result.write_per_class_csv(&mut w)?;
    }
    if result.per_class.iter().any(|c| c.undefined) {
        log::warn!("some classes have no test records; their intervals are reported as [0, 1]");
    }
    println!("{}", json!({ "overall_accuracy": result.overall_accuracy, "records": test.len() }));
    Ok(())
}

