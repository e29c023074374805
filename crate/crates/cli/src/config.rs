use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lnlab_core::noise::NoiseSpec;
use lnlab_core::seed::derive_seed;
use lnlab_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::GlobalArgs;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub num_filters: usize,
    pub kernel: usize,
    pub pool_grid: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            num_filters: 256,
            kernel: 6,
            pool_grid: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingConfig {
    /// Fractions `f` of the clean set replaced by noisy records.
    pub fractions: Vec<f64>,
    /// Noisy records added per removed clean record.
    pub ratios: Vec<usize>,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig {
            fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            ratios: vec![1, 10],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StopRule {
    /// First checkpoint where clean-subset accuracy reaches `tau`.
    Clean,
    /// Checkpoint with the best holdout accuracy.
    Holdout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopping {
    pub rule: StopRule,
    pub tau: f64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            rule: StopRule::Clean,
            tau: 0.99,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupConfig {
    pub k: usize,
}

/// Declarative description of a run. Every section is optional; subcommands
/// read the parts they need. Relative paths resolve against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub clean_manifest: Option<PathBuf>,
    pub noisy_manifest: Option<PathBuf>,
    pub holdout_manifest: Option<PathBuf>,
    pub bank: BankConfig,
    pub train: TrainConfig,
    /// Extra noise injected into the noisy set before mixing.
    pub noise: Option<NoiseSpec>,
    pub mixing: MixingConfig,
    /// Removes exact train/holdout copies before training when present.
    pub dedup: Option<DedupConfig>,
    pub early_stopping: EarlyStopping,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.out,
            &mut cfg.clean_manifest,
            &mut cfg.noisy_manifest,
            &mut cfg.holdout_manifest,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Global flags merged over the optional configuration file.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Ctx {
    pub fn new(global: &GlobalArgs) -> Result<Self> {
        if let Some(n) = global.threads {
            if n == 0 {
                bail!("--threads must be at least 1");
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the thread pool")?;
        }
        let mut cfg = match &global.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = global.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &global.out {
            cfg.out = Some(out.clone());
        }
        Ok(Ctx {
            seed: cfg.seed,
            out: cfg.out.clone(),
            cfg,
        })
    }

    pub fn out_dir(&self) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("this command needs --out <dir> (or \"out\" in the config file)"),
        }
    }

    /// Seed for a named module: global seed XOR FNV-1a of the name.
    pub fn derived(&self, module: &str) -> u64 {
        derive_seed(self.seed, module)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_paths_resolve_against_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        std::fs::write(
            &path,
            r#"{"seed": 3, "clean_manifest": "clean/manifest.jsonl", "train": {"max_iters": 50}, "mixing": {"ratios": [2]}}"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.clean_manifest.unwrap(), dir.path().join("clean/manifest.jsonl"));
        assert_eq!(cfg.train.max_iters, 50);
        assert_eq!(cfg.train.eval_interval, TrainConfig::default().eval_interval);
        assert_eq!(cfg.mixing.ratios, vec![2]);
        assert_eq!(cfg.mixing.fractions.len(), 5);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        std::fs::write(&path, r#"{"sede": 3}"#).unwrap();
        assert!(ExperimentConfig::load(&path).is_err());
    }
}
