#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ccss_core::checkpoint::Checkpoint;
use ccss_core::model::{Ablation, ModelConfig};
use ccss_core::plant::{generate_plant, PlantTruth, SyntheticPlantConfig};
use ccss_core::series::{StandardizationStats, TypedSeries};
use ccss_core::simulator::Simulator;
use ccss_core::training::{train, TrainConfig};
use ccss_server::api::ApiSession;
use ccss_server::config::ServiceConfig;

pub const CONTEXT: usize = 64;
pub const HORIZON: usize = 16;

pub fn plant(n: usize, seed: u64) -> (TypedSeries, PlantTruth) {
    generate_plant(&SyntheticPlantConfig { n_steps: n, seed, ..Default::default() }).unwrap()
}

pub fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 1,
        batch_size: 8,
        horizon: HORIZON,
        max_train_windows: Some(16),
        val_windows: 8,
        model: ModelConfig { context_len: CONTEXT, ..ModelConfig::miniature() },
        ..Default::default()
    }
}

/// Briefly trained miniature checkpoint.
pub fn checkpoint(series: &TypedSeries, seed: u64) -> Checkpoint {
    train(series, &tiny_train_config(seed), None).unwrap().checkpoint
}

/// Untrained checkpoint; the quickest way to a working simulator.
pub fn fresh_checkpoint(series: &TypedSeries, seed: u64) -> Checkpoint {
    let stats = StandardizationStats::fit(series).unwrap();
    let mut config = ModelConfig { context_len: CONTEXT, ..ModelConfig::miniature() };
    config.dt_ref = series.median_dt();
    let (_, store) = ccss_core::model::Model::build(series.schema(), config.clone(), Ablation::default(), seed).unwrap();
    Checkpoint::new(series.schema().clone(), stats, config, Ablation::default(), store, serde_json::Value::Null)
}

pub fn service_config() -> ServiceConfig {
    ServiceConfig { horizon: HORIZON, window_stride: 25, stream_threshold: 40, ..Default::default() }
}

pub fn session(series: &TypedSeries, ck: Checkpoint) -> ApiSession {
    ApiSession::new(Simulator::new(ck).unwrap(), series.clone(), service_config()).unwrap()
}

/// Writes `plant.csv`, its schema sidecar and `model.ccss` into `dir`.
pub fn write_fixture(dir: &Path, series: &TypedSeries, ck: &Checkpoint) -> (PathBuf, PathBuf) {
    let csv = dir.join("plant.csv");
    ccss_core::io::write_csv(series, &csv).unwrap();
    ccss_core::io::write_schema(series.schema(), ccss_core::io::sidecar_path(&csv)).unwrap();
    let model = dir.join("model.ccss");
    ck.save(&model).unwrap();
    (csv, model)
}
