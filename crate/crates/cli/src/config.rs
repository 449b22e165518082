//! `--config` file: plain TOML key/value pairs.
//!
//! ```toml
//! [grbp]
//! beta = 0.03
//! gamma = 0.03
//! tau = 0.7
//! max_tries = 10
//! min_size = 4.0
//! s_min = 0.8
//! s_max = 1.2
//! seed = 42
//!
//! [scoring]
//! thresholds = [0.5, 0.75]
//! types = "types.txt"
//! ```
//!
//! Every key is optional. Command-line flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gmner_core::GrbpConfig;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub grbp: GrbpSection,
    #[serde(default)]
    pub scoring: ScoringSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrbpSection {
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub max_tries: Option<u32>,
    pub min_size: Option<f64>,
    pub s_min: Option<f64>,
    pub s_max: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    pub thresholds: Option<Vec<f64>>,
    /// Type vocabulary file, relative to the config file.
    pub types: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let (Some(types), Some(dir)) = (&cfg.scoring.types, path.parent()) {
            if types.is_relative() {
                cfg.scoring.types = Some(dir.join(types));
            }
        }
        Ok(cfg)
    }
}

/// Per-knob overrides from the command line.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct GrbpOverrides {
    /// Center jitter std-dev, relative to box size
    #[arg(long)]
    pub beta: Option<f64>,
    /// Scale jitter std-dev
    #[arg(long)]
    pub gamma: Option<f64>,
    /// IoU acceptance threshold
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub max_tries: Option<u32>,
    /// Minimum box side in pixels
    #[arg(long)]
    pub min_size: Option<f64>,
    #[arg(long)]
    pub s_min: Option<f64>,
    #[arg(long)]
    pub s_max: Option<f64>,
}

impl GrbpOverrides {
    /// Defaults, then the config file, then flags. The result is validated.
    pub fn resolve(&self, file: &GrbpSection) -> Result<GrbpConfig, gmner_core::grbp::ConfigError> {
        let d = GrbpConfig::default();
        let cfg = GrbpConfig {
            beta: self.beta.or(file.beta).unwrap_or(d.beta),
            gamma: self.gamma.or(file.gamma).unwrap_or(d.gamma),
            tau: self.tau.or(file.tau).unwrap_or(d.tau),
            max_tries: self.max_tries.or(file.max_tries).unwrap_or(d.max_tries),
            min_size: self.min_size.or(file.min_size).unwrap_or(d.min_size),
            s_min: self.s_min.or(file.s_min).unwrap_or(d.s_min),
            s_max: self.s_max.or(file.s_max).unwrap_or(d.s_max),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
