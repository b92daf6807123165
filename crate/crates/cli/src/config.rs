//! Command configs. Every struct rejects unknown keys; see
//! `schema/config.schema.json` for the published shape.

use hpft::experiments::{DownstreamConfig, PretrainConfig, TrendSuiteConfig};
use hpft::training::{HeadSpec, RunOptions, StageConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Parses a config file and checks its schema version.
pub fn load<T: DeserializeOwned + Versioned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Missing(format!("config {}: {e}", path.display())))?;
    let cfg: T = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if cfg.schema_version() != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "schema_version: expected {SCHEMA_VERSION}, got {}",
            cfg.schema_version()
        )));
    }
    Ok(cfg)
}

pub trait Versioned {
    fn schema_version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn schema_version(&self) -> u32 {
                self.schema_version
            }
        })*
    };
}

versioned!(GenDataConfig, PretrainCmdConfig, RunConfig, AnalyzeConfig, SweepConfig, ExchangeConfig, TrendConfig, ReportConfig);

/// Paths in configs are resolved against the config file's directory.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSpec {
    pub d: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub downstream: DownstreamConfig,
    #[serde(default)]
    pub regression: Option<RegressionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainCmdConfig {
    pub schema_version: u32,
    /// Initialization and batch-order seed.
    pub seed: u64,
    /// Seed of the pretraining data (defaults to `seed`).
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

/// Downstream train/valid CSVs as written by `gen-data`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
}

fn default_head() -> HeadSpec {
    HeadSpec::linear()
}

fn default_ntk_probe() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub data: DataPaths,
    #[serde(default = "default_head")]
    pub head: HeadSpec,
    pub hp: StageConfig,
    pub ft: StageConfig,
    #[serde(default)]
    pub options: RunOptions,
    /// Samples used for the kernel probe of the bound check.
    #[serde(default = "default_ntk_probe")]
    pub ntk_probe: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub schema_version: u32,
    /// Output directory of a previous `run`.
    pub run_dir: PathBuf,
    pub data: DataPaths,
    #[serde(default = "default_ntk_probe")]
    pub ntk_probe: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub checkpoint: PathBuf,
    pub data: DataPaths,
    #[serde(default = "default_head")]
    pub head: HeadSpec,
    pub grid: Vec<usize>,
    /// `hp.epochs` is replaced by each grid value.
    pub hp: StageConfig,
    pub ft: StageConfig,
    #[serde(default)]
    pub options: RunOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub checkpoint: PathBuf,
    pub data: DataPaths,
    #[serde(default = "default_head")]
    pub head: HeadSpec,
    pub taus: Vec<usize>,
    pub hp: StageConfig,
    pub ft: StageConfig,
    #[serde(default)]
    pub options: RunOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub trend: TrendSuiteConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Study {
    LsHp { eta_hp: f64, eta_ft: f64 },
    HeadCapacity { heads: Vec<HeadSpec> },
    PartialBackbone { n_last: Vec<usize> },
    AieBound { taus: Vec<usize>, #[serde(default = "default_ntk_probe")] n_probe: usize },
    NtkCompare { #[serde(default = "default_ntk_probe")] n_probe: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub checkpoint: PathBuf,
    pub data: DataPaths,
    #[serde(default = "default_head")]
    pub head: HeadSpec,
    pub hp: StageConfig,
    pub ft: StageConfig,
    #[serde(default)]
    pub options: RunOptions,
    pub study: Study,
}

/// `--seed S` on a multi-seed command: keeps the count, restarts at S.
pub fn reseed(seeds: &mut [u64], start: u64) {
    for (i, s) in seeds.iter_mut().enumerate() {
        *s = start + i as u64;
    }
}

pub fn check_stage(name: &str, cfg: &StageConfig) -> Result<(), CliError> {
    cfg.validate().map_err(|e| CliError::Config(format!("{name}: {e}")))
}

pub fn check_nonempty<T>(name: &str, v: &[T]) -> Result<(), CliError> {
    if v.is_empty() {
        Err(CliError::Config(format!("{name}: must not be empty")))
    } else {
        Ok(())
    }
}
