//! TOML configuration files for each subcommand.

use std::path::{Path, PathBuf};

use anyhow::Context;
use r2dn_core::bench::BenchGrid;
use r2dn_core::{ModelConfig, TrainSchedule};
use serde::de::DeserializeOwned;
use serde::Deserialize;

pub fn read<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn d_contraction_trials() -> usize {
    20
}
fn d_horizon() -> usize {
    300
}
fn d_gain_trials() -> usize {
    1000
}
fn d_gain_horizon() -> usize {
    64
}
fn d_ascent() -> usize {
    50
}
fn d_dissipation_trials() -> usize {
    100
}
fn d_dissipation_horizon() -> usize {
    20
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySettings {
    #[serde(default = "d_contraction_trials")]
    pub contraction_trials: usize,
    #[serde(default = "d_horizon")]
    pub contraction_horizon: usize,
    #[serde(default = "d_gain_trials")]
    pub gain_trials: usize,
    #[serde(default = "d_gain_horizon")]
    pub gain_horizon: usize,
    #[serde(default = "d_ascent")]
    pub ascent_steps: usize,
    #[serde(default = "d_dissipation_trials")]
    pub dissipation_trials: usize,
    #[serde(default = "d_dissipation_horizon")]
    pub dissipation_horizon: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

/// `verify`: a model given by its config (randomly initialized from the
/// seed) or by a checkpoint.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub model: Option<ModelConfig>,
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub verify: VerifySettings,
}

/// `train`: model and schedule.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
}

/// `bench`: the size grid.
pub type BenchConfig = BenchGrid;

/// `export`: the source model, as for `verify`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    pub model: Option<ModelConfig>,
    pub checkpoint: Option<PathBuf>,
}

/// Resolves a checkpoint path relative to the config file's directory.
pub fn relative_to(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or_else(|| Path::new(".")).join(p)
    }
}
