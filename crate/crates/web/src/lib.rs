//! Browser bindings for the demo page. Every export takes and returns JSON
//! text; the `*_json` functions hold the logic and run natively in tests.

use ccss_core::emission::{predictive_interval, StepDistribution, VarDistribution};
use ccss_core::plant::{cols, generate_plant, SyntheticPlantConfig, REGIME_AEROBIC};
use ccss_core::screening::{screen, ScreeningCriteria};
use ccss_core::series::Window;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

type Out = Result<String, String>;

fn parse<'a, T: Deserialize<'a>>(text: &'a str) -> Result<T, String> {
    serde_json::from_str(text).map_err(|e| format!("bad request: {e}"))
}

fn render<T: Serialize>(value: &T) -> Out {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- ranking

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankRequest {
    pub names: Vec<String>,
    pub raw: Vec<[f64; 4]>,
    #[serde(default)]
    pub weights: Option<[f64; 4]>,
}

/// Composite scores, ranks and Pareto flags for a criteria table.
pub fn rank_plans_json(request: &str) -> Out {
    let req: RankRequest = parse(request)?;
    let weights = req.weights.unwrap_or(ScreeningCriteria::default().weights);
    render(&screen(&req.names, &req.raw, weights).map_err(|e| e.to_string())?)
}

// ---------------------------------------------------------------- emission

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityRequest {
    pub mu: f64,
    pub sigma: f64,
    /// Ignored when `gaussian` is set.
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default)]
    pub gaussian: bool,
    #[serde(default)]
    pub pi: Option<f64>,
    #[serde(default = "yes")]
    pub log_space: bool,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn yes() -> bool {
    true
}

fn default_nu() -> f64 {
    5.0
}

fn default_level() -> f64 {
    0.9
}

fn default_points() -> usize {
    200
}

#[derive(Debug, Serialize)]
pub struct DensityCurve {
    /// Probability of an exact zero (0 without a hurdle).
    pub zero_mass: f64,
    /// Grid in original units and the continuous density on it.
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub interval: [f64; 2],
    pub median: f64,
    /// Continuous mass below zero; hurdle draws there are clamped to 0.
    pub clamped_mass: f64,
    /// Zero mass plus the trapezoid integral over the grid.
    pub mass_shown: f64,
}

/// Density of one emission law over original units, with its central
/// interval.
pub fn emission_density_json(request: &str) -> Out {
    let r: DensityRequest = parse(request)?;
    if r.points < 2 {
        return Err("need at least 2 grid points".into());
    }
    let nu = if r.gaussian { f64::INFINITY } else { r.nu };
    let v = VarDistribution { mu: r.mu, sigma: r.sigma, nu, pi: r.pi, log_space: r.log_space };
    v.validate().map_err(|e| e.to_string())?;
    let dist = StepDistribution { vars: vec![v] };
    let (lo, hi) = predictive_interval(&dist, r.level).map_err(|e| e.to_string())?[0];
    let zero_mass = r.pi.unwrap_or(0.0);
    // span the central 99.8% of the continuous part
    let cont = VarDistribution { pi: None, ..v };
    let (a, b) = (cont.quantile(0.001), cont.quantile(0.999));
    let step = (b - a) / (r.points - 1) as f64;
    let x: Vec<f64> = (0..r.points).map(|i| a + i as f64 * step).collect();
    let density: Vec<f64> = x
        .iter()
        .map(|&x| match cont.nll(x) {
            // the likelihood lives on log1p(x); map it back to x
            Ok(n) if r.log_space => (1.0 - zero_mass) * (-n).exp() / (1.0 + x),
            Ok(n) => (1.0 - zero_mass) * (-n).exp(),
            Err(_) => 0.0,
        })
        .collect();
    let trapezoid = |keep: &dyn Fn(f64) -> bool| -> f64 {
        x.windows(2)
            .zip(density.windows(2))
            .filter(|(xs, _)| keep(0.5 * (xs[0] + xs[1])))
            .map(|(_, d)| 0.5 * (d[0] + d[1]) * step)
            .sum()
    };
    let clamped_mass = if r.pi.is_some() { trapezoid(&|m| m < 0.0) } else { 0.0 };
    render(&DensityCurve {
        zero_mass,
        clamped_mass,
        mass_shown: zero_mass + trapezoid(&|_| true),
        x,
        density,
        interval: [lo, hi],
        median: v.quantile(0.5),
    })
}

// ---------------------------------------------------------------- plant

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantRequest {
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub start: usize,
    pub horizon: usize,
    #[serde(default)]
    pub setpoint_delta: f64,
    #[serde(default)]
    pub valve_delta: f64,
}

fn default_steps() -> usize {
    3000
}

fn default_seed() -> u64 {
    7
}

#[derive(Debug, Serialize)]
pub struct PlantResponse {
    /// Minutes since the start of the record, one per rollout row.
    pub timestamps: Vec<f64>,
    pub baseline_nh4: Vec<f64>,
    pub edited_nh4: Vec<f64>,
    pub baseline_no3: Vec<f64>,
    pub edited_no3: Vec<f64>,
    /// Recorded sensor values; `null` where the sensor was down.
    pub recorded_nh4: Vec<Option<f64>>,
    pub aerobic_fraction: f64,
    pub mean_delta_nh4: f64,
}

/// Exact synthetic-plant response to shifting the recorded controls.
pub fn plant_what_if_json(request: &str) -> Out {
    let r: PlantRequest = parse(request)?;
    if r.horizon == 0 || r.start == 0 || r.start + r.horizon > r.n_steps {
        return Err(format!("rows {}..{} do not fit a {}-step record (start ≥ 1)", r.start, r.start + r.horizon, r.n_steps));
    }
    let (series, truth) =
        generate_plant(&SyntheticPlantConfig { n_steps: r.n_steps, seed: r.seed, ..Default::default() }).map_err(|e| e.to_string())?;
    // zero-length context: the rollout starts at `start`
    let w = Window::new(r.start, 0, r.horizon);
    let base_plan = truth.observed_plan(&w);
    let plan: Vec<[f64; 2]> = base_plan.iter().map(|&[s, v]| [s + r.setpoint_delta, v + r.valve_delta]).collect();
    let base = truth.true_what_if(&w, &base_plan).map_err(|e| e.to_string())?;
    let edited = truth.true_what_if(&w, &plan).map_err(|e| e.to_string())?;
    let rows = w.rollout_range();
    let mean_delta_nh4 = base.iter().zip(&edited).map(|(b, e)| e[0] - b[0]).sum::<f64>() / r.horizon as f64;
    render(&PlantResponse {
        timestamps: truth.timestamps[rows.clone()].to_vec(),
        baseline_nh4: base.iter().map(|x| x[0]).collect(),
        edited_nh4: edited.iter().map(|x| x[0]).collect(),
        baseline_no3: base.iter().map(|x| x[1]).collect(),
        edited_no3: edited.iter().map(|x| x[1]).collect(),
        recorded_nh4: rows.map(|i| series.get(i, cols::NH4)).collect(),
        aerobic_fraction: truth.regime_fraction(&w, REGIME_AEROBIC),
        mean_delta_nh4,
    })
}

// ---------------------------------------------------------------- exports

fn js(out: Out) -> Result<String, JsError> {
    out.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = rankPlans)]
pub fn rank_plans(request: &str) -> Result<String, JsError> {
    js(rank_plans_json(request))
}

#[wasm_bindgen(js_name = emissionDensity)]
pub fn emission_density(request: &str) -> Result<String, JsError> {
    js(emission_density_json(request))
}

#[wasm_bindgen(js_name = plantWhatIf)]
pub fn plant_what_if(request: &str) -> Result<String, JsError> {
    js(plant_what_if_json(request))
}
