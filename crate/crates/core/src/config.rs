//! Run configuration: one TOML file holding every knob, with unknown keys
//! rejected and every section validated at load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envsim::EnvParams;
use crate::error::{Error, Result};
use crate::persist::{read_string, write_atomic};
use crate::pipeline::{BaselineConfig, LoopConfig, Pipeline};
use crate::realworld::RealParams;
use crate::rl::PretrainConfig;

pub const CONFIG_SCHEMA: &str = "powertune.config/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    #[serde(default)]
    pub seed: u64,
    /// Parent of every run directory, relative to the working directory.
    #[serde(default = "default_runs_root")]
    pub runs_root: PathBuf,
    #[serde(default)]
    pub env: EnvParams,
    /// Real twin; omitted means the default perturbation of `env`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real: Option<RealParams>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default, rename = "loop")]
    pub pipeline: LoopConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

fn default_runs_root() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA.into(),
            seed: 0,
            runs_root: default_runs_root(),
            env: EnvParams::default(),
            real: None,
            pretrain: PretrainConfig::default(),
            pipeline: LoopConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn real(&self) -> RealParams {
        self.real.clone().unwrap_or_else(|| RealParams::perturbed_from(&self.env))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!("schema {:?}, expected {CONFIG_SCHEMA:?}", self.schema)));
        }
        self.env.validate().map_err(|e| Error::Config(format!("env: {e}")))?;
        self.real().validate()?;
        self.pretrain.validate().map_err(|e| Error::Config(format!("pretrain: {e}")))?;
        self.pipeline.validate().map_err(|e| Error::Config(format!("loop: {e}")))?;
        self.baseline.validate()
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::new(self.env.clone(), self.real(), self.pipeline.clone())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", origin.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_string(path).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml()?.as_bytes())
    }
}
