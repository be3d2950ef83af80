//! JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Exclusion, WindowConfig};
use crate::error::{CoreError, Result};
use crate::interpret::ShapleyConfig;
use crate::models::ModelConfig;
use crate::synthetic::SynthConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub traffic: PathBuf,
    pub weather: Option<PathBuf>,
    pub sensors: Option<PathBuf>,
    pub exclusions: Vec<Exclusion>,
    pub window: WindowConfig,
    pub folds: usize,
    /// Minimum hours between train and held-out origins; `None` is the
    /// window span, history plus horizon.
    pub gap: Option<usize>,
    /// Directory for prepared data, checkpoints and results.
    pub workdir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            traffic: "traffic.csv".into(),
            weather: None,
            sensors: None,
            exclusions: Vec::new(),
            window: WindowConfig::default(),
            folds: 10,
            gap: None,
            workdir: "run".into(),
        }
    }
}

impl DataConfig {
    pub fn gap(&self) -> usize {
        self.gap.unwrap_or_else(|| self.window.span())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Held-out samples explained, evenly spaced over the fold's test block.
    pub max_samples: usize,
    /// Training samples forming the Shapley background.
    pub max_background: usize,
    pub shapley: ShapleyConfig,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            max_samples: 64,
            max_background: 512,
            shapley: ShapleyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
    pub synth: SynthConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::Config(e.to_string()))
    }

    /// Parses `path` and resolves every relative path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        resolve(base, &mut d.traffic);
        resolve(base, &mut d.workdir);
        if let Some(p) = d.weather.as_mut() {
            resolve(base, p);
        }
        if let Some(p) = d.sensors.as_mut() {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.window.validate()?;
        if self.data.folds < 2 {
            return Err(CoreError::Config("data.folds must be at least 2".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(CoreError::Config("eval.batch_size must be at least 1".into()));
        }
        self.train.validate()
    }
}
