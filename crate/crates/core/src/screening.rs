//! Operator workflow: representative windows, what-if plans, candidate-plan
//! ranking, sensor-outage robustness and the decision horizon.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowData;
use crate::encoder::RawDrivers;
use crate::error::{Error, Result};
use crate::evaluation::{rmse, SweepReport};
use crate::series::{quantile_sorted, Schema, TypedSeries, VariableKind, Window};
use crate::simulator::Simulator;
use crate::tensor::Mat;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const WINDOW_SEPARATION: usize = 2000;
pub const SMOOTHING_WIDTH: usize = 21;

// ---------------------------------------------------------------- selection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    /// Range plus total variation.
    Transient,
    /// Power of the dominant frequency band.
    Cycling,
    /// Largest value of an intermittent channel.
    Event,
    /// Number of category switches.
    PhaseChange,
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [Behavior::Transient, Behavior::Cycling, Behavior::Event, Behavior::PhaseChange];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transient" => Ok(Behavior::Transient),
            "cycling" => Ok(Behavior::Cycling),
            "event" => Ok(Behavior::Event),
            "phase-change" => Ok(Behavior::PhaseChange),
            other => Err(Error::Config(format!(
                "unknown behavior `{other}` (transient, cycling, event, phase-change)"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Behavior::Transient => "transient",
            Behavior::Cycling => "cycling",
            Behavior::Event => "event",
            Behavior::PhaseChange => "phase-change",
        }
    }
}

/// Which variable each behavior statistic reads, by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorVariables {
    pub transient: String,
    pub cycling: String,
    pub event: String,
    pub phase: String,
}

impl Default for BehaviorVariables {
    fn default() -> Self {
        Self::plant()
    }
}

impl BehaviorVariables {
    pub fn plant() -> Self {
        BehaviorVariables {
            transient: "nh4".into(),
            cycling: "no3".into(),
            event: "n2o".into(),
            phase: "phase".into(),
        }
    }

    pub fn for_behavior(&self, b: Behavior) -> &str {
        match b {
            Behavior::Transient => &self.transient,
            Behavior::Cycling => &self.cycling,
            Behavior::Event => &self.event,
            Behavior::PhaseChange => &self.phase,
        }
    }
}

fn var_index(schema: &Schema, name: &str) -> Result<usize> {
    schema
        .index_of(name)
        .ok_or_else(|| Error::Schema(format!("unknown variable `{name}`")))
}

fn observed_rollout(series: &TypedSeries, window: &Window, var: usize) -> Result<Vec<f64>> {
    let r = window.rollout_range();
    if r.end > series.len() {
        return Err(Error::Range(format!("window {} beyond series end", window.start)));
    }
    Ok(r.filter_map(|row| series.get(row, var)).collect())
}

/// Share of power in the strongest three-bin band of the mean-removed signal.
pub fn dominant_band_power(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let power: Vec<f64> = buf[..=n / 2].iter().map(|c| c.norm_sqr() / (n * n) as f64).collect();
    (1..power.len())
        .map(|k| power[k - 1..(k + 2).min(power.len())].iter().skip(usize::from(k == 1)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Behavior statistic of a window's observed rollout.
pub fn behavior_score(series: &TypedSeries, window: &Window, behavior: Behavior, var: usize) -> Result<f64> {
    let x = observed_rollout(series, window, var)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(match behavior {
        Behavior::Transient => {
            let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let tv: f64 = x.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
            hi - lo + tv
        }
        Behavior::Cycling => dominant_band_power(&x),
        Behavior::Event => x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Behavior::PhaseChange => x.windows(2).filter(|w| w[0] != w[1]).count() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedWindow {
    pub window: Window,
    pub score: f64,
}

/// Greedy selection by descending score with a minimum start separation.
/// Ties keep the earlier start.
pub fn select_ranked(mut scored: Vec<RankedWindow>, separation: usize, limit: Option<usize>) -> Result<Vec<RankedWindow>> {
    if scored.is_empty() {
        return Err(Error::Population { requested: 1, population: 0 });
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.window.start.cmp(&b.window.start)));
    let mut picked: Vec<RankedWindow> = Vec::new();
    for c in scored {
        if limit.is_some_and(|l| picked.len() >= l) {
            break;
        }
        if picked.iter().all(|p| p.window.start.abs_diff(c.window.start) >= separation) {
            picked.push(c);
        }
    }
    Ok(picked)
}

pub fn select_windows(
    series: &TypedSeries,
    windows: &[Window],
    behavior: Behavior,
    vars: &BehaviorVariables,
    separation: usize,
    limit: Option<usize>,
) -> Result<Vec<RankedWindow>> {
    let var = var_index(series.schema(), vars.for_behavior(behavior))?;
    let scored = windows
        .iter()
        .map(|w| Ok(RankedWindow { window: *w, score: behavior_score(series, w, behavior, var)? }))
        .collect::<Result<Vec<_>>>()?;
    select_ranked(scored, separation, limit)
}

// ---------------------------------------------------------------- plans

/// How a plan departs from the observed one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Perturbation {
    /// Add `delta` to one control over the whole horizon.
    Shift { control: String, delta: f64 },
    /// Add `delta` on steps `from..to`.
    SegmentShift { control: String, delta: f64, from: usize, to: usize },
    /// Centered moving average of `width` steps, truncated at the edges.
    Smooth { control: String, width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum Provenance {
    Observed,
    Perturbed { edits: Vec<Perturbation> },
}

/// Candidate future control plan. Exogenous and categorical futures always
/// come from the window's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanScenario {
    pub name: String,
    /// Control names in schema order.
    pub control_names: Vec<String>,
    /// One column per control, `H` values each, original units.
    pub controls: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

/// Centered moving average with shrinking windows at the edges.
pub fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let n = x.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            // direct sum keeps constants exact
            if x[lo..hi].iter().all(|&v| v == x[lo]) {
                x[lo]
            } else {
                (prefix[hi] - prefix[lo]) / (hi - lo) as f64
            }
        })
        .collect()
}

impl Perturbation {
    pub fn control(&self) -> &str {
        match self {
            Perturbation::Shift { control, .. }
            | Perturbation::SegmentShift { control, .. }
            | Perturbation::Smooth { control, .. } => control,
        }
    }

    fn apply(&self, col: &mut [f64]) -> Result<()> {
        match *self {
            Perturbation::Shift { delta, .. } => col.iter_mut().for_each(|v| *v += delta),
            Perturbation::SegmentShift { delta, from, to, .. } => {
                if from > to || to > col.len() {
                    return Err(Error::Plan(format!("segment {from}..{to} outside 0..{}", col.len())));
                }
                col[from..to].iter_mut().for_each(|v| *v += delta);
            }
            Perturbation::Smooth { width, .. } => {
                if width == 0 {
                    return Err(Error::Plan("smoothing width must be positive".into()));
                }
                let s = moving_average(col, width);
                col.copy_from_slice(&s);
            }
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Plan("perturbed plan is not finite".into()));
        }
        Ok(())
    }
}

impl PlanScenario {
    pub fn observed(schema: &Schema, raw: &RawDrivers) -> Self {
        PlanScenario {
            name: "Observed".into(),
            control_names: schema
                .indices(VariableKind::Control)
                .iter()
                .map(|&j| schema.variables[j].name.clone())
                .collect(),
            controls: raw.controls.clone(),
            provenance: Provenance::Observed,
        }
    }

    pub fn steps(&self) -> usize {
        self.controls.first().map_or(0, Vec::len)
    }

    /// Applies edits in order on top of this plan.
    pub fn perturbed(&self, name: &str, edits: Vec<Perturbation>) -> Result<Self> {
        let mut out = self.clone();
        out.name = name.to_string();
        for e in &edits {
            let c = out
                .control_names
                .iter()
                .position(|n| n == e.control())
                .ok_or_else(|| Error::Plan(format!("unknown control `{}`", e.control())))?;
            e.apply(&mut out.controls[c])?;
        }
        let mut all = match &self.provenance {
            Provenance::Observed => Vec::new(),
            Provenance::Perturbed { edits } => edits.clone(),
        };
        all.extend(edits);
        out.provenance = Provenance::Perturbed { edits: all };
        Ok(out)
    }

    /// Drivers with this plan's controls and the recorded everything-else.
    pub fn to_drivers(&self, schema: &Schema, recorded: &RawDrivers) -> Result<RawDrivers> {
        let names: Vec<String> = schema
            .indices(VariableKind::Control)
            .iter()
            .map(|&j| schema.variables[j].name.clone())
            .collect();
        if names != self.control_names {
            return Err(Error::Plan(format!(
                "plan `{}` controls {:?} differ from the schema's {:?}",
                self.name, self.control_names, names
            )));
        }
        let h = recorded.steps();
        for (name, col) in self.control_names.iter().zip(&self.controls) {
            if col.len() != h {
                return Err(Error::Plan(format!(
                    "plan `{}`: control `{name}` has {} steps, window horizon is {h}",
                    self.name,
                    col.len()
                )));
            }
            if let Some(t) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Plan(format!("plan `{}`: control `{name}` is not finite at step {t}", self.name)));
            }
        }
        Ok(RawDrivers { controls: self.controls.clone(), ..recorded.clone() })
    }
}

/// Names of the two plant actuators used by the built-in plan families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanControls {
    pub setpoint: String,
    pub valve: String,
}

impl Default for PlanControls {
    fn default() -> Self {
        PlanControls { setpoint: "o2_setpoint".into(), valve: "valve".into() }
    }
}

/// Setpoint +0.2, setpoint −0.2 and valve +10.
pub fn builtin_scenarios(observed: &PlanScenario, controls: &PlanControls) -> Result<Vec<PlanScenario>> {
    let shift = |c: &str, d: f64| vec![Perturbation::Shift { control: c.into(), delta: d }];
    Ok(vec![
        observed.perturbed("Setpoint +0.2", shift(&controls.setpoint, 0.2))?,
        observed.perturbed("Setpoint -0.2", shift(&controls.setpoint, -0.2))?,
        observed.perturbed("Valve +10", shift(&controls.valve, 10.0))?,
    ])
}

/// The eight screening candidates, observed first.
pub fn build_candidate_plans(observed: &PlanScenario, controls: &PlanControls) -> Result<Vec<PlanScenario>> {
    let h = observed.steps();
    let third = h.div_ceil(3);
    let sp = controls.setpoint.as_str();
    let shift = |d: f64| vec![Perturbation::Shift { control: sp.into(), delta: d }];
    let front = |d: f64| vec![Perturbation::SegmentShift { control: sp.into(), delta: d, from: 0, to: third }];
    let valve = |d: f64| vec![Perturbation::Shift { control: controls.valve.clone(), delta: d }];
    Ok(vec![
        observed.clone(),
        observed.perturbed("Setpoint +0.1", shift(0.1))?,
        observed.perturbed("Setpoint -0.1", shift(-0.1))?,
        observed.perturbed("Smoothed setpoint", vec![Perturbation::Smooth { control: sp.into(), width: SMOOTHING_WIDTH }])?,
        observed.perturbed("Front-load +0.2", front(0.2))?,
        observed.perturbed("Front-load -0.2", front(-0.2))?,
        observed.perturbed("Valve +5", valve(5.0))?,
        observed.perturbed("Valve -5", valve(-5.0))?,
    ])
}

// ---------------------------------------------------------------- what-if

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRollout {
    pub name: String,
    pub provenance: Provenance,
    /// `[t][k]` point prediction, original units.
    pub mean: Vec<Vec<f64>>,
    /// `[t][k]` 95% predictive bounds, original units.
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    /// `[t][k]` regime weights.
    pub regimes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub scenario: String,
    pub horizon: usize,
    /// Per state variable: perturbed minus observed-plan prediction.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfReport {
    pub schema_version: u32,
    pub window_start: usize,
    pub variables: Vec<String>,
    pub horizons: Vec<usize>,
    pub baseline: ScenarioRollout,
    pub scenarios: Vec<ScenarioRollout>,
    pub deltas: Vec<DeltaRow>,
    /// Per scenario and variable, mean delta over the whole horizon.
    pub mean_deltas: Vec<DeltaRow>,
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows).map(|t| m.row(t).to_vec()).collect()
}

/// Rollout of one plan from a shared belief.
pub fn rollout_plan(
    sim: &Simulator,
    data: &WindowData,
    belief: &crate::encoder::BeliefState,
    plan: &PlanScenario,
) -> Result<ScenarioRollout> {
    let raw = plan.to_drivers(&sim.checkpoint.schema, &data.raw_drivers)?;
    let d = sim.with_plan(data, raw)?;
    let traj = sim.rollout_from_belief(belief, &d)?;
    let mean = sim.point_original(&traj);
    let s = mean.cols;
    let mut lower = Mat::zeros(traj.steps, s);
    let mut upper = Mat::zeros(traj.steps, s);
    for t in 0..traj.steps {
        let iv = crate::emission::predictive_interval(&sim.step_distribution(&traj, t), 0.95)
            .map_err(|e| Error::numeric(format!("rollout step {t}"), e.to_string()))?;
        for (k, (lo, hi)) in iv.into_iter().enumerate() {
            lower.set(t, k, lo);
            upper.set(t, k, hi);
        }
    }
    Ok(ScenarioRollout {
        name: plan.name.clone(),
        provenance: plan.provenance.clone(),
        mean: rows(&mean),
        lower: rows(&lower),
        upper: rows(&upper),
        regimes: rows(&traj.regimes),
    })
}

/// Rolls every scenario out from the same belief and tabulates deltas against
/// the observed plan at the requested (1-based) horizons.
pub fn what_if(sim: &Simulator, data: &WindowData, scenarios: &[PlanScenario], horizons: &[usize]) -> Result<WhatIfReport> {
    let h = data.targets.steps;
    if let Some(&bad) = horizons.iter().find(|&&x| x == 0 || x > h) {
        return Err(Error::Range(format!("delta horizon {bad} outside 1..={h}")));
    }
    let belief = sim.belief(data)?;
    let observed = PlanScenario::observed(&sim.checkpoint.schema, &data.raw_drivers);
    let baseline = rollout_plan(sim, data, &belief, &observed)?;
    let runs = scenarios
        .iter()
        .map(|p| rollout_plan(sim, data, &belief, p))
        .collect::<Result<Vec<_>>>()?;
    let s = baseline.mean.first().map_or(0, Vec::len);
    let mut deltas = Vec::new();
    let mut mean_deltas = Vec::new();
    for r in &runs {
        for &hz in horizons {
            deltas.push(DeltaRow {
                scenario: r.name.clone(),
                horizon: hz,
                delta: (0..s).map(|k| r.mean[hz - 1][k] - baseline.mean[hz - 1][k]).collect(),
            });
        }
        mean_deltas.push(DeltaRow {
            scenario: r.name.clone(),
            horizon: h,
            delta: (0..s)
                .map(|k| (0..h).map(|t| r.mean[t][k] - baseline.mean[t][k]).sum::<f64>() / h as f64)
                .collect(),
        });
    }
    Ok(WhatIfReport {
        schema_version: REPORT_SCHEMA_VERSION,
        window_start: data.window.start,
        variables: crate::evaluation::state_names(sim),
        horizons: horizons.to_vec(),
        baseline,
        scenarios: runs,
        deltas,
        mean_deltas,
    })
}

impl WhatIfReport {
    /// Delta table in the layout scenario × (variable @ horizon).
    pub fn delta_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["scenario".to_string()];
        for v in &self.variables {
            for h in &self.horizons {
                header.push(format!("{v}@{h}"));
            }
        }
        w.write_record(&header).map_err(csv_err)?;
        for sc in &self.scenarios {
            let mut rec = vec![sc.name.clone()];
            for k in 0..self.variables.len() {
                for h in &self.horizons {
                    let d = self
                        .deltas
                        .iter()
                        .find(|d| d.scenario == sc.name && d.horizon == *h)
                        .map_or(f64::NAN, |d| d.delta[k]);
                    rec.push(format!("{d:+.6}"));
                }
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

// ---------------------------------------------------------------- ranking

pub const CRITERIA: [&str; 4] = ["mean_target", "emission_p95", "band_violation", "control_deviation"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreeningCriteria {
    /// Weights of mean target level, emission 95th percentile, band violation
    /// and control deviation.
    pub weights: [f64; 4],
    pub target_variable: String,
    pub emission_variable: String,
    /// State or control whose trajectory must stay inside `band`.
    pub band_variable: String,
    pub band: (f64, f64),
}

impl Default for ScreeningCriteria {
    fn default() -> Self {
        ScreeningCriteria {
            weights: [0.40, 0.25, 0.20, 0.15],
            target_variable: "nh4".into(),
            emission_variable: "n2o".into(),
            band_variable: "o2_setpoint".into(),
            band: (1.0, 2.0),
        }
    }
}

impl ScreeningCriteria {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("screening weights must be ≥ 0, got {:?}", self.weights)));
        }
        if !(self.band.0 <= self.band.1) {
            return Err(Error::Config(format!("band {:?} has lo > hi", self.band)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanScore {
    pub name: String,
    pub raw: [f64; 4],
    pub normalized: [f64; 4],
    pub composite: f64,
    pub pareto: bool,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub schema_version: u32,
    pub criteria: Vec<String>,
    pub weights: [f64; 4],
    /// In input order.
    pub plans: Vec<PlanScore>,
}

/// `a` dominates `b`: no worse anywhere and strictly better somewhere.
pub fn dominates(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Min-max normalization, weighted composite (lower is better), Pareto flags
/// on the raw criteria, and ranks by composite with ties in input order.
pub fn screen(names: &[String], raw: &[[f64; 4]], weights: [f64; 4]) -> Result<ScreeningReport> {
    if names.len() != raw.len() {
        return Err(Error::Range(format!("{} names for {} criteria rows", names.len(), raw.len())));
    }
    if raw.len() < 2 {
        return Err(Error::Population { requested: 2, population: raw.len() });
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config("screening weights must be ≥ 0".into()));
    }
    if raw.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Domain("screening criteria must be finite".into()));
    }
    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    for r in raw {
        for i in 0..4 {
            lo[i] = lo[i].min(r[i]);
            hi[i] = hi[i].max(r[i]);
        }
    }
    let mut plans: Vec<PlanScore> = names
        .iter()
        .zip(raw)
        .map(|(n, r)| {
            let mut norm = [0.0; 4];
            for i in 0..4 {
                if hi[i] > lo[i] {
                    norm[i] = (r[i] - lo[i]) / (hi[i] - lo[i]);
                }
            }
            PlanScore {
                name: n.clone(),
                raw: *r,
                normalized: norm,
                composite: norm.iter().zip(&weights).map(|(a, b)| a * b).sum(),
                pareto: !raw.iter().any(|o| dominates(o, r)),
                rank: 0,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..plans.len()).collect();
    order.sort_by(|&a, &b| plans[a].composite.total_cmp(&plans[b].composite).then(a.cmp(&b)));
    for (r, &i) in order.iter().enumerate() {
        plans[i].rank = r + 1;
    }
    Ok(ScreeningReport {
        schema_version: REPORT_SCHEMA_VERSION,
        criteria: CRITERIA.iter().map(|s| s.to_string()).collect(),
        weights,
        plans,
    })
}

impl ScreeningReport {
    /// Plans in rank order.
    pub fn ranked(&self) -> Vec<&PlanScore> {
        let mut v: Vec<&PlanScore> = self.plans.iter().collect();
        v.sort_by_key(|p| p.rank);
        v
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["rank".to_string(), "plan".into()];
        header.extend(CRITERIA.iter().map(|c| c.to_string()));
        header.extend(CRITERIA.iter().map(|c| format!("{c}_norm")));
        header.extend(["composite".to_string(), "pareto".into()]);
        w.write_record(&header).map_err(csv_err)?;
        for p in self.ranked() {
            let mut rec = vec![p.rank.to_string(), p.name.clone()];
            rec.extend(p.raw.iter().map(|x| format!("{x:.6}")));
            rec.extend(p.normalized.iter().map(|x| format!("{x:.6}")));
            rec.push(format!("{:.6}", p.composite));
            rec.push(p.pareto.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Raw criteria of one plan's rollout.
pub fn plan_criteria(
    sim: &Simulator,
    rollout: &ScenarioRollout,
    plan: &PlanScenario,
    observed: &PlanScenario,
    criteria: &ScreeningCriteria,
) -> Result<[f64; 4]> {
    let schema = &sim.checkpoint.schema;
    let state_pos = |name: &str| -> Result<usize> {
        let j = var_index(schema, name)?;
        sim.model
            .roles
            .state
            .iter()
            .position(|&s| s == j)
            .ok_or_else(|| Error::Config(format!("`{name}` is not a state variable")))
    };
    let h = rollout.mean.len();
    if h == 0 {
        return Err(Error::Plan("empty rollout".into()));
    }
    let target = state_pos(&criteria.target_variable)?;
    let emission = state_pos(&criteria.emission_variable)?;
    let mean_target = rollout.mean.iter().map(|r| r[target]).sum::<f64>() / h as f64;
    let mut em: Vec<f64> = rollout.mean.iter().map(|r| r[emission]).collect();
    em.sort_by(f64::total_cmp);
    let p95 = quantile_sorted(&em, 0.95);
    let band_series: Vec<f64> = if let Ok(k) = state_pos(&criteria.band_variable) {
        rollout.mean.iter().map(|r| r[k]).collect()
    } else {
        let c = plan
            .control_names
            .iter()
            .position(|n| *n == criteria.band_variable)
            .ok_or_else(|| Error::Config(format!("band variable `{}` is neither state nor control", criteria.band_variable)))?;
        plan.controls[c].clone()
    };
    let (lo, hi) = criteria.band;
    let violation = band_series.iter().map(|&x| (lo - x).max(x - hi).max(0.0)).sum::<f64>() / band_series.len() as f64;
    // mean absolute departure from the observed plan in training-sd units
    let controls = schema.indices(VariableKind::Control);
    let mut dev = 0.0;
    for (c, &j) in controls.iter().enumerate() {
        let sd = sim.checkpoint.stats.vars[j].sd;
        dev += plan.controls[c]
            .iter()
            .zip(&observed.controls[c])
            .map(|(a, b)| (a - b).abs() / sd)
            .sum::<f64>()
            / h as f64;
    }
    Ok([mean_target, p95, violation, dev / controls.len().max(1) as f64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningRun {
    pub window_start: usize,
    pub report: ScreeningReport,
    pub rollouts: Vec<ScenarioRollout>,
}

/// Rolls out every plan from one belief and ranks them.
pub fn screen_plans(sim: &Simulator, data: &WindowData, plans: &[PlanScenario], criteria: &ScreeningCriteria) -> Result<ScreeningRun> {
    criteria.validate()?;
    let belief = sim.belief(data)?;
    let observed = PlanScenario::observed(&sim.checkpoint.schema, &data.raw_drivers);
    let mut raws = Vec::with_capacity(plans.len());
    let mut rollouts = Vec::with_capacity(plans.len());
    for p in plans {
        let r = rollout_plan(sim, data, &belief, p)?;
        raws.push(plan_criteria(sim, &r, p, &observed, criteria)?);
        rollouts.push(r);
    }
    let names: Vec<String> = plans.iter().map(|p| p.name.clone()).collect();
    Ok(ScreeningRun {
        window_start: data.window.start,
        report: screen(&names, &raws, criteria.weights)?,
        rollouts,
    })
}

// ---------------------------------------------------------------- outages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageCondition {
    pub name: String,
    pub variables: Vec<String>,
    /// Final context steps blanked.
    pub steps: usize,
}

impl OutageCondition {
    pub fn new(variables: &[&str], steps: usize) -> Self {
        OutageCondition {
            name: format!("{}@{steps}", variables.join("+")),
            variables: variables.iter().map(|s| s.to_string()).collect(),
            steps,
        }
    }

    pub fn empty() -> Self {
        OutageCondition { name: "none".into(), variables: Vec::new(), steps: 0 }
    }
}

/// The three plant conditions; the aeration setpoint channel stands in for a
/// dissolved-oxygen sensor.
pub fn plant_outage_conditions() -> Vec<OutageCondition> {
    vec![
        OutageCondition::new(&["nh4"], 60),
        OutageCondition::new(&["nh4", "o2_setpoint"], 180),
        OutageCondition::new(&["nh4", "no3", "n2o", "o2_setpoint"], 360),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageVariable {
    pub variable: String,
    pub baseline_rmse: f64,
    pub outage_rmse: f64,
    /// `outage / baseline − 1` of the window means.
    pub change: f64,
    pub ratio_median: f64,
    pub ratio_q25: f64,
    pub ratio_q75: f64,
    /// Per-window ratio, window order.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageResult {
    pub condition: OutageCondition,
    pub per_variable: Vec<OutageVariable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageReport {
    pub schema_version: u32,
    pub windows: Vec<usize>,
    pub results: Vec<OutageResult>,
}

/// Same window with the last `cond.steps` context rows of the named variables
/// blanked. Drivers and targets are left as recorded.
pub fn mask_context(sim: &Simulator, series: &TypedSeries, data: &WindowData, cond: &OutageCondition) -> Result<WindowData> {
    let ctx = data.window.context_range();
    if cond.steps > ctx.len() {
        return Err(Error::Range(format!(
            "outage of {} steps exceeds the {}-step context",
            cond.steps,
            ctx.len()
        )));
    }
    if cond.variables.is_empty() || cond.steps == 0 {
        return Ok(data.clone());
    }
    let vars = cond
        .variables
        .iter()
        .map(|n| var_index(series.schema(), n))
        .collect::<Result<Vec<_>>>()?;
    let rows = ctx.end - cond.steps..ctx.end;
    let masked = series.with_masked(rows.flat_map(|r| vars.iter().map(move |&v| (r, v))));
    let fresh = sim.prepare(&masked, &data.window)?;
    Ok(WindowData { tokens: fresh.tokens, ..data.clone() })
}

fn window_rmse(sim: &Simulator, items: &[&WindowData]) -> Result<Vec<Vec<f64>>> {
    let trajs = sim.run(items)?;
    items
        .iter()
        .zip(&trajs)
        .map(|(d, tr)| {
            let p = crate::simulator::point_prediction(&sim.model, &sim.checkpoint.stats, tr);
            rmse(&p, &d.targets.y, &d.targets.mask)
        })
        .collect()
}

/// Paired per-variable RMSE of masked-context rollouts against unmasked ones.
pub fn outage_study(sim: &Simulator, series: &TypedSeries, items: &[&WindowData], conditions: &[OutageCondition]) -> Result<OutageReport> {
    if items.is_empty() {
        return Err(Error::Population { requested: 1, population: 0 });
    }
    let names = crate::evaluation::state_names(sim);
    let base = window_rmse(sim, items)?;
    let mut results = Vec::with_capacity(conditions.len());
    for cond in conditions {
        let masked = items
            .iter()
            .map(|d| mask_context(sim, series, d, cond))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&WindowData> = masked.iter().collect();
        let out = window_rmse(sim, &refs)?;
        let per_variable = names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let b: Vec<f64> = base.iter().map(|r| r[k]).collect();
                let o: Vec<f64> = out.iter().map(|r| r[k]).collect();
                let ratios: Vec<f64> = b.iter().zip(&o).map(|(b, o)| if b == o { 1.0 } else { o / b }).collect();
                let mut sorted = ratios.clone();
                sorted.sort_by(f64::total_cmp);
                let mb = b.iter().sum::<f64>() / b.len() as f64;
                let mo = o.iter().sum::<f64>() / o.len() as f64;
                OutageVariable {
                    variable: name.clone(),
                    baseline_rmse: mb,
                    outage_rmse: mo,
                    change: if mb == mo { 0.0 } else { mo / mb - 1.0 },
                    ratio_median: quantile_sorted(&sorted, 0.5),
                    ratio_q25: quantile_sorted(&sorted, 0.25),
                    ratio_q75: quantile_sorted(&sorted, 0.75),
                    ratios,
                }
            })
            .collect();
        results.push(OutageResult { condition: cond.clone(), per_variable });
    }
    Ok(OutageReport {
        schema_version: REPORT_SCHEMA_VERSION,
        windows: items.iter().map(|d| d.window.start).collect(),
        results,
    })
}

impl OutageReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["condition", "variable", "baseline_rmse", "outage_rmse", "change", "ratio_q25", "ratio_median", "ratio_q75"])
            .map_err(csv_err)?;
        for r in &self.results {
            for v in &r.per_variable {
                w.write_record([
                    r.condition.name.clone(),
                    v.variable.clone(),
                    format!("{:.6}", v.baseline_rmse),
                    format!("{:.6}", v.outage_rmse),
                    format!("{:+.6}", v.change),
                    format!("{:.6}", v.ratio_q25),
                    format!("{:.6}", v.ratio_median),
                    format!("{:.6}", v.ratio_q75),
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }
}

// ---------------------------------------------------------------- horizon

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableHorizon {
    pub variable: String,
    pub steps: usize,
    pub hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub schema_version: u32,
    pub median_dt_minutes: f64,
    pub threshold: f64,
    pub grid: Vec<usize>,
    pub per_variable: Vec<VariableHorizon>,
    pub sweep: SweepReport,
}

/// Largest grid point `h` such that at every grid point up to `h` the model's
/// cumulative RMSE is below persistence and at most `threshold`. 0 when the
/// first grid point already fails.
pub fn decision_horizon_steps(grid: &[usize], model: &[f64], persistence: &[f64], threshold: f64) -> usize {
    let mut best = 0;
    for ((&h, &m), &p) in grid.iter().zip(model).zip(persistence) {
        if m < p && m <= threshold {
            best = h;
        } else {
            break;
        }
    }
    best
}

pub fn steps_to_hours(steps: usize, median_dt_minutes: f64) -> f64 {
    steps as f64 * median_dt_minutes / 60.0
}

/// Per-variable decision horizon from a sweep, plus the pooled aggregate as
/// the last entry (`ALL`).
pub fn decision_horizon(sweep: SweepReport, median_dt_minutes: f64, threshold: f64) -> Result<HorizonReport> {
    let grid: Vec<usize> = sweep.model.horizons.iter().map(|h| h.horizon).collect();
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("horizon grid must be increasing".into()));
    }
    let n_vars = sweep.model.horizons.first().map_or(0, |h| h.per_variable.len());
    let mut curves: BTreeMap<usize, (String, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (m, p) in sweep.model.horizons.iter().zip(&sweep.persistence.horizons) {
        for k in 0..n_vars {
            let e = curves.entry(k).or_insert_with(|| (m.per_variable[k].variable.clone(), Vec::new(), Vec::new()));
            e.1.push(m.per_variable[k].metrics.rmse);
            e.2.push(p.per_variable[k].metrics.rmse);
        }
        let e = curves.entry(n_vars).or_insert_with(|| ("ALL".into(), Vec::new(), Vec::new()));
        e.1.push(m.aggregate.rmse);
        e.2.push(p.aggregate.rmse);
    }
    let per_variable = curves
        .into_values()
        .map(|(name, m, p)| {
            let steps = decision_horizon_steps(&grid, &m, &p, threshold);
            VariableHorizon { variable: name, steps, hours: steps_to_hours(steps, median_dt_minutes) }
        })
        .collect();
    Ok(HorizonReport {
        schema_version: REPORT_SCHEMA_VERSION,
        median_dt_minutes,
        threshold,
        grid,
        per_variable,
        sweep,
    })
}

impl HorizonReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variable", "steps", "hours"]).map_err(csv_err)?;
        for v in &self.per_variable {
            w.write_record([v.variable.clone(), v.steps.to_string(), format!("{:.2}", v.hours)])
                .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}
