use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ResultExt, ScopeError};
use crate::evaluation::AggregationMode;
use crate::types::HyperParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    #[default]
    File,
    Synthetic,
}

/// One-at-a-time sweep grid. Each listed value is run with the other knobs held at the
/// config's hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub tau: Vec<f64>,
    pub top_r: Vec<usize>,
    pub lambda: Vec<f64>,
    /// Support-sampling seeds per grid point; empty means the config seed only.
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.tau.is_empty() && self.top_r.is_empty() && self.lambda.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub hyperparams: HyperParams,
    /// Overrides the manifest's per-stage K.
    pub k_shot: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub provider: ProviderMode,
    pub aggregation: AggregationMode,
    pub include_stage0_in_miou_i: bool,
    /// Prebuilt bank to use instead of building one.
    pub bank: Option<PathBuf>,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            hyperparams: HyperParams::default(),
            k_shot: None,
            seed: 0,
            out: PathBuf::from("out"),
            provider: ProviderMode::File,
            aggregation: AggregationMode::PerRunHm,
            include_stage0_in_miou_i: true,
            bank: None,
            sweep: SweepGrid::default(),
        }
    }
}

impl RunConfig {
    /// Load a JSON config; relative paths inside it resolve against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at_path(path)?;
        let mut cfg: RunConfig = serde_json::from_slice(&bytes).at_path(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.manifest);
        fix(&mut cfg.out);
        if let Some(b) = cfg.bank.as_mut() {
            fix(b);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        if self.k_shot == Some(0) {
            return Err(ScopeError::Config("k_shot must be >= 1".into()));
        }
        if !self.manifest.is_file() {
            return Err(ScopeError::Config(format!(
                "manifest {} does not exist",
                self.manifest.display()
            )));
        }
        if let Some(b) = &self.bank {
            if !b.is_file() {
                return Err(ScopeError::Config(format!("bank {} does not exist", b.display())));
            }
        }
        Ok(())
    }

    pub fn manifest_root(&self) -> PathBuf {
        self.manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }
}
