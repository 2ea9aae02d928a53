//! Run configuration files.
//!
//! A run is described by one TOML file: the `[training]` table (every field
//! of [`TrainingConfig`]) plus run-level paths (data root, output directory,
//! optional custom prior spec file). Command-line flags override file
//! values; the resolved configuration is written into the artifacts
//! directory before any compute.

use crate::data::DatasetTag;
use crate::error::{ExonError, Result};
use crate::priors::MixturePriorSpec;
use crate::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "EXON_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub training: TrainingConfig,
    /// Custom prior layout file; `None` uses the dataset's designed layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// Flag-level overrides, applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub beta: Option<f64>,
    pub lambda1: Option<f64>,
    pub n_labeled: Option<usize>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn default_for(tag: DatasetTag) -> Self {
        RunConfig {
            training: TrainingConfig::for_dataset(tag),
            prior_file: None,
            data_root: None,
            out_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ExonError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| ExonError::Config(format!("bad config: {e}")))?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(v) = o.beta {
            self.training.beta = v;
        }
        if let Some(v) = o.lambda1 {
            self.training.lambda1 = v;
        }
        if let Some(v) = o.n_labeled {
            self.training.n_labeled = v;
        }
        if let Some(v) = o.seed {
            self.training.seed = v;
        }
        if let Some(v) = o.epochs {
            self.training.epochs = v;
        }
        if let Some(v) = &o.data_root {
            self.data_root = Some(v.clone());
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = Some(v.clone());
        }
    }

    /// The prior this run trains against: the custom file when given,
    /// otherwise the dataset's designed layout.
    pub fn resolved_prior(&self) -> Result<MixturePriorSpec> {
        match &self.prior_file {
            Some(path) => MixturePriorSpec::load(path),
            None => self.training.default_prior(),
        }
    }

    /// Resolution order for the data root: flag/file value, then the
    /// environment variable.
    pub fn resolved_data_root(&self) -> Result<PathBuf> {
        if let Some(root) = &self.data_root {
            return Ok(root.clone());
        }
        if let Ok(env) = std::env::var(DATA_ROOT_ENV) {
            return Ok(PathBuf::from(env));
        }
        Err(ExonError::Config(format!(
            "no data root: set {DATA_ROOT_ENV} or pass --data-root"
        )))
    }
}
