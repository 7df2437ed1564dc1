//! Dataset loading and window bookkeeping shared by the CLI and the service.

use std::ops::Range;
use std::path::Path;

use ccss_core::dataset::WindowData;
use ccss_core::io::{load_csv, read_schema, sidecar_path};
use ccss_core::screening::{behavior_score, Behavior, BehaviorVariables};
use ccss_core::series::{eligible_starts, sample_eval_windows, split_index, TypedSeries, Window};
use ccss_core::simulator::Simulator;
use ccss_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const TRAIN_FRACTION: f64 = 0.70;
pub const EVAL_SEED: u64 = 42;

/// Loads a historian CSV using `schema`, or the CSV's sidecar when absent.
pub fn load_dataset(csv: &Path, schema: Option<&Path>) -> Result<TypedSeries> {
    let schema_path = schema.map(Path::to_path_buf).unwrap_or_else(|| sidecar_path(csv));
    let schema = read_schema(&schema_path)?;
    load_csv(csv, &schema)
}

/// Rows after the temporal split.
pub fn test_region(series: &TypedSeries) -> Range<usize> {
    split_index(series.len(), TRAIN_FRACTION)..series.len()
}

/// Evaluation windows sampled from the test region, with absolute starts.
pub fn eval_windows(series: &TypedSeries, count: usize, seed: u64, context_len: usize, horizon: usize) -> Result<Vec<Window>> {
    let region = test_region(series);
    let test = series.slice(region.clone())?;
    Ok(sample_eval_windows(&test, count, seed, context_len, horizon)?
        .into_iter()
        .map(|w| Window::new(w.start + region.start, context_len, horizon))
        .collect())
}

/// Eligible windows wholly inside the test region, every `stride` starts.
pub fn test_windows(series: &TypedSeries, context_len: usize, horizon: usize, stride: usize) -> Result<Vec<Window>> {
    let region = test_region(series);
    let test = series.slice(region.clone())?;
    Ok(eligible_starts(&test, context_len, horizon)
        .into_iter()
        .step_by(stride.max(1))
        .map(|s| Window::new(s + region.start, context_len, horizon))
        .collect())
}

pub fn prepare_all(sim: &Simulator, series: &TypedSeries, windows: &[Window]) -> Result<Vec<WindowData>> {
    windows.iter().map(|w| sim.prepare(series, w)).collect()
}

/// Why a window id cannot be served.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowFault {
    /// The window runs past the end of the record.
    Unknown,
    /// Some state value in the rollout is missing.
    Ineligible,
}

pub fn check_window(series: &TypedSeries, window: &Window) -> std::result::Result<(), WindowFault> {
    match ccss_core::series::window_eligibility(series, window.start, window.context_len, window.horizon) {
        Err(_) => Err(WindowFault::Unknown),
        Ok(false) => Err(WindowFault::Ineligible),
        Ok(true) => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorScore {
    pub behavior: Behavior,
    pub score: f64,
}

/// Scores of every behavior whose variable exists in the schema.
pub fn behavior_scores(series: &TypedSeries, window: &Window, vars: &BehaviorVariables) -> Result<Vec<BehaviorScore>> {
    let mut out = Vec::new();
    for b in Behavior::ALL {
        if let Some(j) = series.schema().index_of(vars.for_behavior(b)) {
            out.push(BehaviorScore { behavior: b, score: behavior_score(series, window, b, j)? });
        }
    }
    Ok(out)
}

/// Top-ranked test window for a behavior.
pub fn pick_window(series: &TypedSeries, behavior: Behavior, vars: &BehaviorVariables, context_len: usize, horizon: usize) -> Result<Window> {
    let windows = test_windows(series, context_len, horizon, 1)?;
    let ranked = ccss_core::screening::select_windows(series, &windows, behavior, vars, 1, Some(1))?;
    Ok(ranked[0].window)
}

/// Writes `text` to `dir/name`, creating the directory.
pub fn write_output(dir: &Path, name: &str, text: &str) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(Error::from)
}
