#![allow(dead_code)]

use ccss_core::dataset::WindowData;
use ccss_core::model::{Ablation, Model, ModelConfig};
use ccss_core::params::ParamStore;
use ccss_core::plant::{generate_plant, PlantTruth, SyntheticPlantConfig};
use ccss_core::series::{eligible_starts, StandardizationStats, TypedSeries, Window};

pub fn small_plant(n: usize, seed: u64) -> (TypedSeries, PlantTruth) {
    let cfg = SyntheticPlantConfig { n_steps: n, seed, ..Default::default() };
    generate_plant(&cfg).unwrap()
}

pub fn tiny_config(context_len: usize) -> ModelConfig {
    ModelConfig { context_len, ..ModelConfig::miniature() }
}

pub struct Fixture {
    pub series: TypedSeries,
    pub truth: PlantTruth,
    pub stats: StandardizationStats,
    pub config: ModelConfig,
    pub model: Model,
    pub store: ParamStore,
}

pub fn fixture(context_len: usize, ablation: Ablation, seed: u64) -> Fixture {
    let (series, truth) = small_plant(3000, 11);
    let stats = StandardizationStats::fit(&series).unwrap();
    let mut config = tiny_config(context_len);
    config.dt_ref = series.median_dt();
    let (model, store) = Model::build(series.schema(), config.clone(), ablation, seed).unwrap();
    Fixture { series, truth, stats, config, model, store }
}

impl Fixture {
    pub fn windows(&self, horizon: usize, count: usize) -> Vec<WindowData> {
        let starts = eligible_starts(&self.series, self.config.context_len, horizon);
        assert!(starts.len() >= count, "only {} eligible windows", starts.len());
        let stride = starts.len() / count;
        (0..count)
            .map(|i| {
                let w = Window::new(starts[i * stride], self.config.context_len, horizon);
                WindowData::new(&self.series, &w, &self.stats, &self.config).unwrap()
            })
            .collect()
    }
}
