use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SynthSpec;

/// How the PCA-truncated covariance is corrected back to the marginal variances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    Multiplicative,
    Additive,
}

/// Settings for one batch run. Stored as TOML; unknown keys are rejected
/// and every key without a documented default is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Archive manifest, relative to the config file.
    pub archive: PathBuf,
    /// Output directory for all stage artifacts, relative to the config file.
    pub run_dir: PathBuf,
    pub train_end_year: i32,
    pub validation_first_year: i32,
    pub validation_last_year: i32,
    pub months: Vec<u32>,
    pub taper_range_km: f64,
    pub retained_fraction: f64,
    pub correction: CorrectionMode,
    pub sample_count: usize,
    pub sma_windows: Vec<usize>,
    pub ema_scales: Vec<f64>,
    pub truncation_floor: f64,
    pub seed: u64,
    /// Worker threads; 0 picks the number of cores.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default = "default_variogram_order")]
    pub variogram_order: f64,
    /// Sea indices of a path whose minimum is scored as a derived functional.
    #[serde(default)]
    pub route: Vec<usize>,
    /// Number of draws of the primary multivariate forecast exported as field files.
    #[serde(default)]
    pub export_members: usize,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
}

fn default_permutations() -> usize {
    1000
}

fn default_variogram_order() -> f64 {
    0.5
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            archive: PathBuf::from("archive/manifest.toml"),
            run_dir: PathBuf::from("run"),
            train_end_year: 2000,
            validation_first_year: 2001,
            validation_last_year: 2016,
            months: (1..=12).collect(),
            taper_range_km: 2500.0,
            retained_fraction: 0.9,
            correction: CorrectionMode::Multiplicative,
            sample_count: 500,
            sma_windows: (1..=30).collect(),
            ema_scales: (1..=50).map(|i| i as f64 / 100.0).collect(),
            truncation_floor: -1.79,
            seed: 1,
            workers: 0,
            permutations: default_permutations(),
            variogram_order: default_variogram_order(),
            route: Vec::new(),
            export_members: 0,
            synth: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_end_year >= self.validation_first_year {
            return Err(Error::Config(
                "train_end_year must precede validation_first_year".into(),
            ));
        }
        if self.validation_last_year < self.validation_first_year {
            return Err(Error::Config("empty validation period".into()));
        }
        if !(self.retained_fraction > 0.0 && self.retained_fraction <= 1.0) {
            return Err(Error::Config("retained_fraction must lie in (0, 1]".into()));
        }
        if !(self.taper_range_km > 0.0) {
            return Err(Error::Config("taper_range_km must be positive".into()));
        }
        if self.months.is_empty() || self.months.iter().any(|m| !(1..=12).contains(m)) {
            return Err(Error::Config(
                "months must be a non-empty subset of 1..=12".into(),
            ));
        }
        if self.sample_count < 2 {
            return Err(Error::Config("sample_count must be at least 2".into()));
        }
        if self.sma_windows.is_empty() || self.sma_windows.contains(&0) {
            return Err(Error::Config(
                "sma_windows must be non-empty and positive".into(),
            ));
        }
        if self.ema_scales.is_empty() || self.ema_scales.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Config(
                "ema_scales must be non-empty and positive".into(),
            ));
        }
        if !(self.variogram_order > 0.0) {
            return Err(Error::Config("variogram_order must be positive".into()));
        }
        if self.permutations == 0 {
            return Err(Error::Config("permutations must be positive".into()));
        }
        Ok(())
    }

    pub fn validation_years(&self) -> std::ops::RangeInclusive<i32> {
        self.validation_first_year..=self.validation_last_year
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_config(config: &RunConfig, path: &Path) -> Result<()> {
    let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
