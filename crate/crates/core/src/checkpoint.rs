//! Frozen model: parameters, schema, standardization and configuration in one
//! container file.

use std::path::Path;

use serde_json::json;

use crate::error::{Error, Result};
use crate::io::{Container, NamedTensor, TensorData};
use crate::model::{Ablation, Model, ModelConfig};
use crate::params::ParamStore;
use crate::series::{Schema, StandardizationStats};

pub const CHECKPOINT_FORMAT: &str = "ccss-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schema: Schema,
    pub stats: StandardizationStats,
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub params: ParamStore,
    /// Free-form training metadata (seed, epochs, per-epoch log).
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    /// Parameters are rounded to the stored `f32` precision up front so a
    /// checkpoint in memory equals its reloaded copy.
    pub fn new(
        schema: Schema,
        stats: StandardizationStats,
        config: ModelConfig,
        ablation: Ablation,
        mut params: ParamStore,
        metadata: serde_json::Value,
    ) -> Self {
        params.round_to_f32();
        Checkpoint {
            schema,
            stats,
            config,
            ablation,
            params,
            metadata,
        }
    }

    /// Rebuilds the parameter layout for this checkpoint.
    pub fn model(&self) -> Result<Model> {
        Ok(Model::build(&self.schema, self.config.clone(), self.ablation, 0)?.0)
    }

    pub fn to_container(&self) -> Result<Container> {
        let tensors = self
            .params
            .names()
            .iter()
            .zip(self.params.values())
            .map(|(name, m)| NamedTensor {
                name: name.clone(),
                shape: vec![m.rows, m.cols],
                data: TensorData::F32(m.data.iter().map(|&x| x as f32).collect()),
            })
            .collect();
        Ok(Container {
            metadata: json!({
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "schema": self.schema,
                "schema_hash": self.schema.hash(),
                "stats": self.stats,
                "model": self.config,
                "ablation": self.ablation,
                "training": self.metadata,
            }),
            tensors,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.metadata;
        if meta.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint("container is not a model checkpoint".into()));
        }
        let version = meta.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let field = |name: &str| {
            meta.get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{name}`")))
        };
        let schema: Schema = serde_json::from_value(field("schema")?)?;
        let hash = field("schema_hash")?;
        if hash.as_str() != Some(schema.hash().as_str()) {
            return Err(Error::Checkpoint("schema hash does not match the stored schema".into()));
        }
        let stats: StandardizationStats = serde_json::from_value(field("stats")?)?;
        let config: ModelConfig = serde_json::from_value(field("model")?)?;
        let ablation: Ablation = serde_json::from_value(field("ablation")?)?;
        let (_, mut params) = Model::build(&schema, config.clone(), ablation, 0)?;
        params.load_named(|name| {
            c.get(name).map(|t| (t.shape.clone(), t.data.to_f64()))
        })?;
        if c.tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                c.tensors.len(),
                params.len()
            )));
        }
        Ok(Checkpoint {
            schema,
            stats,
            config,
            ablation,
            params,
            metadata: meta.get("training").cloned().unwrap_or(serde_json::Value::Null),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
