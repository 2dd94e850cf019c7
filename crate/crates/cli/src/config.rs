//! Declarative run configuration (TOML) with command-line overrides.

use std::path::{Path, PathBuf};

use prognosis_core::classifier::TrainConfig;
use prognosis_core::masking::{HsvThresholds, MaskingConfig};
use prognosis_core::patching::{DEFAULT_CAP, DEFAULT_COVERAGE_MIN, DEFAULT_PATCH_SIZE};
use prognosis_core::pipeline::{PipelineConfig, Seeds};
use prognosis_core::{Magnification, Parallelism};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub dropout_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub batch_size: Option<usize>,
    pub augmentation: Option<bool>,
    pub hidden_units: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n: Option<usize>,
    pub balance: Option<String>,
    pub size: u32,
    pub signal_strength: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n: None,
            balance: None,
            size: prognosis_core::cohort::DEFAULT_SYNTHETIC_SIDE,
            signal_strength: prognosis_core::cohort::DEFAULT_SIGNAL_STRENGTH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub cohort: PathBuf,
    pub output: PathBuf,
    pub magnifications: Vec<Magnification>,
    pub patch_size: u32,
    pub coverage_min: f64,
    pub cap: usize,
    pub radius: u32,
    pub thresholds: HsvThresholds,
    pub folds: usize,
    pub seed: u64,
    pub train: TrainOverrides,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cohort: PathBuf::from("cohort"),
            output: PathBuf::from("run"),
            magnifications: vec![Magnification::X20],
            patch_size: DEFAULT_PATCH_SIZE,
            coverage_min: DEFAULT_COVERAGE_MIN,
            cap: DEFAULT_CAP,
            radius: prognosis_core::masking::DEFAULT_RADIUS,
            thresholds: HsvThresholds::default(),
            folds: 5,
            seed: 0,
            train: TrainOverrides::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.cohort = base.join(&cfg.cohort);
        cfg.output = base.join(&cfg.output);
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::for_scales(self.magnifications.len());
        let o = &self.train;
        macro_rules! apply {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = o.$field { t.$target = v; })*
            };
        }
        apply!(
            learning_rate => learning_rate,
            momentum => momentum,
            dropout_rate => dropout_rate,
            max_epochs => max_epochs,
            patience => patience,
            min_delta => min_delta,
            batch_size => batch_size,
            augmentation => augmentation_enabled,
            hidden_units => hidden_units
        );
        t
    }

    pub fn pipeline(&self, parallelism: Parallelism) -> Result<PipelineConfig, CliError> {
        let cfg = PipelineConfig {
            magnifications: self.magnifications.clone(),
            patch_size: self.patch_size,
            coverage_min: self.coverage_min,
            cap: self.cap,
            masking: MaskingConfig {
                thresholds: self.thresholds,
                radius: self.radius,
            },
            folds: self.folds,
            seeds: Seeds::from_base(self.seed),
            train: self.train_config(),
            parallelism,
        };
        cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(cfg)
    }
}

/// Parses `good:bad` and reconciles it with `n`.
pub fn resolve_balance(n: Option<usize>, balance: Option<&str>) -> Result<(usize, usize), CliError> {
    let parsed = match balance {
        Some(b) => {
            let (g, bad) = b
                .split_once(':')
                .ok_or_else(|| CliError::Validation(format!("balance {b:?} must look like GOOD:BAD")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Validation(format!("balance {b:?} must look like GOOD:BAD")))
            };
            Some((num(g)?, num(bad)?))
        }
        None => None,
    };
    match (n, parsed) {
        (Some(n), Some((g, b))) if g + b != n => Err(CliError::Validation(format!(
            "--n {n} disagrees with --balance {g}:{b} ({} slides)",
            g + b
        ))),
        (_, Some((g, b))) => Ok((g, b)),
        (Some(n), None) => Ok((n - n / 2, n / 2)),
        (None, None) => Err(CliError::Validation("synth needs --n or --balance".into())),
    }
}
