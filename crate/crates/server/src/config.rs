//! Service configuration: a TOML file plus environment overrides.

use std::path::{Path, PathBuf};

use ccss_core::screening::{BehaviorVariables, PlanControls, ScreeningCriteria};
use serde::{Deserialize, Serialize};

pub const ENV_PORT: &str = "CCSS_PORT";
pub const ENV_DATA_ROOT: &str = "CCSS_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Base directory for relative `checkpoint`, `dataset` and `schema` paths.
    pub data_root: PathBuf,
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Schema sidecar; defaults to the dataset's `.schema.json`.
    pub schema: Option<PathBuf>,
    /// Rollout horizon of listed windows and of requests that omit one.
    pub horizon: usize,
    /// Step between listed window starts.
    pub window_stride: usize,
    /// Rollouts longer than this many steps stream as NDJSON.
    pub stream_threshold: usize,
    pub criteria: ScreeningCriteria,
    pub controls: PlanControls,
    pub behaviors: BehaviorVariables,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            data_root: PathBuf::from("."),
            checkpoint: PathBuf::from("model.ccss"),
            dataset: PathBuf::from("plant.csv"),
            schema: None,
            horizon: 200,
            window_stride: 50,
            stream_threshold: 500,
            criteria: ScreeningCriteria::default(),
            controls: PlanControls::default(),
            behaviors: BehaviorVariables::plant(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("bad config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{var}={value} is not a valid port")]
    Port { var: &'static str, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    /// Applies `CCSS_PORT` and `CCSS_DATA_ROOT` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup(ENV_PORT) {
            self.port = v.trim().parse().map_err(|_| ConfigError::Port { var: ENV_PORT, value: v })?;
        }
        if let Some(v) = lookup(ENV_DATA_ROOT) {
            self.data_root = PathBuf::from(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.horizon == 0 || self.window_stride == 0 {
            return Err(ConfigError::Invalid("horizon and window_stride must be positive".into()));
        }
        self.criteria.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_root.join(p)
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.checkpoint)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.resolve(&self.dataset)
    }

    pub fn schema_path(&self) -> PathBuf {
        match &self.schema {
            Some(s) => self.resolve(s),
            None => ccss_core::io::sidecar_path(&self.dataset_path()),
        }
    }
}
