//! HTTP service over a frozen checkpoint and one dataset.
//!
//! Every response body is JSON carrying `schema_version`, except long
//! rollouts, which stream as NDJSON: a header object followed by one object
//! per rollout step.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ccss_core::checkpoint::Checkpoint;
use ccss_core::dataset::WindowData;
use ccss_core::encoder::BeliefState;
use ccss_core::screening::{
    rollout_plan, screen, screen_plans, select_ranked, Behavior, PlanScenario, Perturbation, RankedWindow, ScenarioRollout,
    ScreeningCriteria, ScreeningReport, WINDOW_SEPARATION,
};
use ccss_core::series::{TypedSeries, VariableKind, Window};
use ccss_core::simulator::Simulator;
use ccss_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ServiceConfig;
use crate::workflow::{self, check_window, BehaviorScore, WindowFault};

pub const API_SCHEMA_VERSION: u32 = 1;
pub const NDJSON: &str = "application/x-ndjson";
/// Windows per behavior that receive a badge.
pub const BADGES_PER_BEHAVIOR: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Badge {
    pub behavior: Behavior,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub id: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub scores: Vec<BehaviorScore>,
    /// Behaviors for which this window is among the top picks, best first.
    pub badges: Vec<Badge>,
}

/// Read-only state shared by all requests.
pub struct ApiSession {
    pub sim: Simulator,
    pub series: TypedSeries,
    pub config: ServiceConfig,
    catalog: Vec<WindowEntry>,
    beliefs: Mutex<HashMap<usize, Arc<BeliefState>>>,
}

impl ApiSession {
    pub fn new(sim: Simulator, series: TypedSeries, config: ServiceConfig) -> ccss_core::Result<Self> {
        sim.check_series(&series)?;
        let catalog = build_catalog(&sim, &series, &config)?;
        Ok(ApiSession { sim, series, config, catalog, beliefs: Mutex::new(HashMap::new()) })
    }

    /// Loads checkpoint and dataset named by `config`.
    pub fn open(config: ServiceConfig) -> ccss_core::Result<Self> {
        let sim = Simulator::new(Checkpoint::load(config.checkpoint_path())?)?;
        let series = workflow::load_dataset(&config.dataset_path(), Some(&config.schema_path()))?;
        Self::new(sim, series, config)
    }

    pub fn catalog(&self) -> &[WindowEntry] {
        &self.catalog
    }

    fn window(&self, id: usize, horizon: Option<usize>) -> Result<Window, ApiError> {
        let h = horizon.unwrap_or(self.config.horizon);
        if h == 0 {
            return Err(ApiError::bad_request("horizon must be at least 1", Some("horizon")));
        }
        let w = Window::new(id, self.sim.checkpoint.config.context_len, h);
        match check_window(&self.series, &w) {
            Ok(()) => Ok(w),
            Err(WindowFault::Unknown) => Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_window",
                format!("no window {id} with horizon {h} in a record of {} steps", self.series.len()),
            )),
            Err(WindowFault::Ineligible) => Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "ineligible_window",
                format!("window {id} has missing state values in its {h}-step rollout"),
            )),
        }
    }

    /// Belief for a window start; cached, and identical to a fresh encoding.
    pub fn belief(&self, data: &WindowData) -> ccss_core::Result<Arc<BeliefState>> {
        let key = data.window.start;
        if let Some(b) = self.beliefs.lock().expect("belief cache").get(&key) {
            return Ok(b.clone());
        }
        let b = Arc::new(self.sim.belief(data)?);
        self.beliefs.lock().expect("belief cache").insert(key, b.clone());
        Ok(b)
    }

    pub fn cached_beliefs(&self) -> usize {
        self.beliefs.lock().expect("belief cache").len()
    }

    fn state_names(&self) -> Vec<String> {
        ccss_core::evaluation::state_names(&self.sim)
    }
}

fn build_catalog(sim: &Simulator, series: &TypedSeries, config: &ServiceConfig) -> ccss_core::Result<Vec<WindowEntry>> {
    let windows = workflow::test_windows(series, sim.checkpoint.config.context_len, config.horizon, config.window_stride)?;
    let mut entries: Vec<WindowEntry> = windows
        .iter()
        .map(|w| {
            Ok(WindowEntry {
                id: w.start,
                start_time: series.timestamps()[w.start],
                end_time: series.timestamps()[w.end() - 1],
                scores: workflow::behavior_scores(series, w, &config.behaviors)?,
                badges: Vec::new(),
            })
        })
        .collect::<ccss_core::Result<_>>()?;
    if entries.is_empty() {
        return Ok(entries);
    }
    for b in Behavior::ALL {
        let scored: Vec<RankedWindow> = windows
            .iter()
            .zip(&entries)
            .filter_map(|(w, e)| e.scores.iter().find(|s| s.behavior == b).map(|s| RankedWindow { window: *w, score: s.score }))
            .collect();
        if scored.is_empty() {
            continue;
        }
        for (rank, r) in select_ranked(scored, WINDOW_SEPARATION, Some(BADGES_PER_BEHAVIOR))?.iter().enumerate() {
            let e = entries.iter_mut().find(|e| e.id == r.window.start).expect("window in catalog");
            e.badges.push(Badge { behavior: b, rank: rank + 1 });
        }
    }
    for e in &mut entries {
        e.badges.sort_by_key(|b| b.rank);
    }
    Ok(entries)
}

// ---------------------------------------------------------------- errors

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub field: Option<String>,
    pub step: Option<usize>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), field: None, step: None }
    }

    fn bad_request(message: impl Into<String>, field: Option<&str>) -> Self {
        ApiError { field: field.map(str::to_string), ..Self::new(StatusCode::BAD_REQUEST, "bad_request", message) }
    }

    fn numeric(step: Option<usize>, message: impl Into<String>) -> Self {
        ApiError { step, ..Self::new(StatusCode::INTERNAL_SERVER_ERROR, "numeric_failure", message) }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Plan(m) => ApiError { code: "bad_plan", ..ApiError::bad_request(m, Some("plan")) },
            Error::Range(m) | Error::Config(m) => ApiError::bad_request(m, None),
            Error::Numeric { location, message } => {
                let step = location.rsplit(' ').next().and_then(|s| s.parse().ok());
                ApiError::numeric(step, format!("{location}: {message}"))
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({ "code": self.code, "message": self.message });
        if let Some(f) = &self.field {
            err["field"] = json!(f);
        }
        if let Some(s) = self.step {
            err["step"] = json!(s);
        }
        (self.status, Json(json!({ "schema_version": API_SCHEMA_VERSION, "error": err }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, reporting the path of the offending field.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = (path != ".").then_some(path);
        ApiError { field, ..ApiError::bad_request(e.inner().to_string(), None) }
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

// ---------------------------------------------------------------- routes

pub fn router(session: Arc<ApiSession>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/windows", get(list_windows))
        .route("/windows/{id}", get(window_detail))
        .route("/rollout", post(rollout))
        .route("/screen", post(screen_route))
        .with_state(session)
}

async fn health(State(s): State<Arc<ApiSession>>) -> Json<serde_json::Value> {
    let ck = &s.sim.checkpoint;
    Json(json!({
        "schema_version": API_SCHEMA_VERSION,
        "status": "ok",
        "model": ck.ablation.label(),
        "schema_hash": ck.schema.hash(),
        "context_len": ck.config.context_len,
        "horizon": s.config.horizon,
        "windows": s.catalog.len(),
        "variables": s.state_names(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct ListQuery {
    pub behavior: Option<String>,
    pub limit: Option<usize>,
}

async fn list_windows(State(s): State<Arc<ApiSession>>, Query(q): Query<ListQuery>) -> ApiResult<Json<serde_json::Value>> {
    let mut entries: Vec<&WindowEntry> = s.catalog.iter().collect();
    if let Some(name) = &q.behavior {
        let b = Behavior::parse(name).map_err(|e| ApiError::bad_request(e.to_string(), Some("behavior")))?;
        let score = |e: &WindowEntry| e.scores.iter().find(|x| x.behavior == b).map_or(f64::NEG_INFINITY, |x| x.score);
        entries.sort_by(|a, c| score(c).total_cmp(&score(a)).then(a.id.cmp(&c.id)));
    }
    if let Some(l) = q.limit {
        entries.truncate(l);
    }
    Ok(Json(json!({
        "schema_version": API_SCHEMA_VERSION,
        "context_len": s.sim.checkpoint.config.context_len,
        "horizon": s.config.horizon,
        "windows": entries,
    })))
}

#[derive(Debug, Deserialize)]
pub struct HorizonQuery {
    pub horizon: Option<usize>,
}

fn parse_id(raw: &str) -> ApiResult<usize> {
    raw.parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "unknown_window", format!("no window `{raw}`")))
}

async fn window_detail(
    State(s): State<Arc<ApiSession>>,
    Path(raw): Path<String>,
    Query(q): Query<HorizonQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let w = s.window(parse_id(&raw)?, q.horizon)?;
    let schema = s.series.schema();
    let rows: Vec<Vec<Option<f64>>> = (w.start..w.end())
        .map(|r| (0..schema.len()).map(|j| s.series.get(r, j)).collect())
        .collect();
    let kinds: Vec<VariableKind> = schema.variables.iter().map(|v| v.kind).collect();
    Ok(Json(json!({
        "schema_version": API_SCHEMA_VERSION,
        "id": w.start,
        "context_len": w.context_len,
        "horizon": w.horizon,
        "variables": schema.variables.iter().map(|v| &v.name).collect::<Vec<_>>(),
        "kinds": kinds,
        "levels": schema.variables.iter().map(|v| &v.levels).collect::<Vec<_>>(),
        "timestamps": &s.series.timestamps()[w.start..w.end()],
        "values": rows,
        "scores": workflow::behavior_scores(&s.series, &w, &s.config.behaviors)?,
    })))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRequest {
    pub window: usize,
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Full plan; omitted means the observed plan.
    #[serde(default)]
    pub plan: Option<PlanScenario>,
    /// Edits applied to the observed plan, as an alternative to `plan`.
    #[serde(default)]
    pub edits: Option<Vec<Perturbation>>,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResponse {
    pub schema_version: u32,
    pub window: usize,
    pub horizon: usize,
    pub variables: Vec<String>,
    pub timestamps: Vec<f64>,
    /// The plan as resolved by the service.
    pub plan: PlanScenario,
    pub scenario: ScenarioRollout,
}

#[derive(Debug, Deserialize)]
pub struct StreamQuery {
    pub stream: Option<bool>,
}

fn first_nonfinite_step(r: &ScenarioRollout) -> Option<usize> {
    let bad = |m: &Vec<Vec<f64>>| m.iter().position(|row| row.iter().any(|x| !x.is_finite()));
    [bad(&r.mean), bad(&r.lower), bad(&r.upper), bad(&r.regimes)].into_iter().flatten().min()
}

/// Rollout of one plan; the pure core of `POST /rollout`.
pub fn run_rollout(s: &ApiSession, req: &RolloutRequest) -> ApiResult<RolloutResponse> {
    let w = s.window(req.window, req.horizon)?;
    let data = s.sim.prepare(&s.series, &w)?;
    let observed = PlanScenario::observed(s.series.schema(), &data.raw_drivers);
    let plan = match (&req.plan, &req.edits) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give either `plan` or `edits`, not both", Some("edits"))),
        (Some(p), None) => p.clone(),
        (None, Some(e)) => observed.perturbed(req.name.as_deref().unwrap_or("Edited"), e.clone())?,
        (None, None) => observed,
    };
    let belief = s.belief(&data)?;
    let scenario = rollout_plan(&s.sim, &data, &belief, &plan)?;
    if let Some(step) = first_nonfinite_step(&scenario) {
        return Err(ApiError::numeric(Some(step), format!("non-finite prediction at rollout step {step}")));
    }
    Ok(RolloutResponse {
        schema_version: API_SCHEMA_VERSION,
        window: w.start,
        horizon: w.horizon,
        variables: s.state_names(),
        timestamps: s.series.timestamps()[w.rollout_range()].to_vec(),
        plan,
        scenario,
    })
}

/// NDJSON lines of a rollout: a header, then one object per step.
pub fn ndjson_lines(r: &RolloutResponse) -> Vec<String> {
    let mut lines = Vec::with_capacity(r.horizon + 1);
    lines.push(
        json!({
            "schema_version": r.schema_version,
            "window": r.window,
            "horizon": r.horizon,
            "variables": r.variables,
            "plan": r.plan,
            "name": r.scenario.name,
            "provenance": r.scenario.provenance,
        })
        .to_string(),
    );
    for t in 0..r.horizon {
        lines.push(
            json!({
                "step": t,
                "timestamp": r.timestamps[t],
                "mean": r.scenario.mean[t],
                "lower": r.scenario.lower[t],
                "upper": r.scenario.upper[t],
                "regimes": r.scenario.regimes[t],
            })
            .to_string(),
        );
    }
    lines
}

async fn rollout(State(s): State<Arc<ApiSession>>, Query(q): Query<StreamQuery>, body: Bytes) -> ApiResult<Response> {
    let req: RolloutRequest = parse_body(&body)?;
    let threshold = s.config.stream_threshold;
    let resp = blocking(move || run_rollout(&s, &req)).await?;
    if q.stream.unwrap_or(resp.horizon > threshold) {
        let chunks = ndjson_lines(&resp).into_iter().map(|l| Ok::<_, std::convert::Infallible>(format!("{l}\n")));
        let body = Body::from_stream(futures::stream::iter(chunks));
        return Ok(([(header::CONTENT_TYPE, NDJSON)], body).into_response());
    }
    Ok(Json(resp).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawCriteria {
    pub name: String,
    pub raw: [f64; 4],
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenRequest {
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Plans to compare; omitted means the built-in candidate set.
    #[serde(default)]
    pub plans: Option<Vec<PlanScenario>>,
    #[serde(default)]
    pub criteria: Option<ScreeningCriteria>,
    /// Overrides `criteria.weights`.
    #[serde(default)]
    pub weights: Option<[f64; 4]>,
    /// Precomputed criteria: re-rank without any rollout.
    #[serde(default)]
    pub raw: Option<Vec<RawCriteria>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenResponse {
    pub schema_version: u32,
    pub window: Option<usize>,
    pub report: ScreeningReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rollouts: Option<Vec<ScenarioRollout>>,
}

/// The pure core of `POST /screen`.
pub fn run_screen(s: &ApiSession, req: &ScreenRequest) -> ApiResult<ScreenResponse> {
    let mut criteria = req.criteria.clone().unwrap_or_else(|| s.config.criteria.clone());
    if let Some(w) = req.weights {
        criteria.weights = w;
    }
    criteria.validate().map_err(|e| ApiError::bad_request(e.to_string(), Some("weights")))?;
    if let Some(raw) = &req.raw {
        let names: Vec<String> = raw.iter().map(|r| r.name.clone()).collect();
        let rows: Vec<[f64; 4]> = raw.iter().map(|r| r.raw).collect();
        let report = screen(&names, &rows, criteria.weights).map_err(|e| ApiError::bad_request(e.to_string(), Some("raw")))?;
        return Ok(ScreenResponse { schema_version: API_SCHEMA_VERSION, window: req.window, report, rollouts: None });
    }
    let id = req.window.ok_or_else(|| ApiError::bad_request("`window` is required unless `raw` is given", Some("window")))?;
    let w = s.window(id, req.horizon)?;
    let data = s.sim.prepare(&s.series, &w)?;
    let plans = match &req.plans {
        Some(p) => p.clone(),
        None => {
            let observed = PlanScenario::observed(s.series.schema(), &data.raw_drivers);
            ccss_core::screening::build_candidate_plans(&observed, &s.config.controls)?
        }
    };
    let run = screen_plans(&s.sim, &data, &plans, &criteria)?;
    Ok(ScreenResponse { schema_version: API_SCHEMA_VERSION, window: Some(w.start), report: run.report, rollouts: Some(run.rollouts) })
}

async fn screen_route(State(s): State<Arc<ApiSession>>, body: Bytes) -> ApiResult<Json<ScreenResponse>> {
    let req: ScreenRequest = parse_body(&body)?;
    Ok(Json(blocking(move || run_screen(&s, &req)).await?))
}
