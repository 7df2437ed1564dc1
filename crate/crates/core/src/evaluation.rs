//! Rollout metrics, the persistence baseline, difficulty stratification and
//! bootstrap intervals.
//!
//! All metrics live in per-variable standardized space (training statistics,
//! `log1p` first for log-space variables), so variables with unlike units can
//! be averaged into one number. Aggregates over windows are means of
//! per-window values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowData;
use crate::dynamics::Trajectory;
use crate::emission::ZERO_THRESHOLD;
use crate::error::{Error, Result};
use crate::series::{quantile_sorted, StandardizationStats, VariableKind};
use crate::simulator::{point_prediction, Simulator};
use crate::tensor::Mat;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const BOOTSTRAP_RESAMPLES: usize = 3000;
pub const DEFAULT_CRPS_SAMPLES: usize = 64;

fn check_shapes(pred: &Mat, target: &Mat, mask: &Mat) -> Result<()> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::Range(format!(
            "shape mismatch: prediction {:?}, target {:?}, mask {:?}",
            pred.shape(),
            target.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

fn masked_column_mean(pred: &Mat, target: &Mat, mask: &Mat, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    check_shapes(pred, target, mask)?;
    Ok((0..pred.cols)
        .map(|k| {
            let (mut sum, mut n) = (0.0, 0usize);
            for t in 0..pred.rows {
                if mask.at(t, k) > 0.0 {
                    sum += f(pred.at(t, k) - target.at(t, k));
                    n += 1;
                }
            }
            if n == 0 { f64::NAN } else { sum / n as f64 }
        })
        .collect())
}

/// Per-column RMSE over entries with `mask > 0`. A column with no observed
/// entry yields `NaN`.
pub fn rmse(pred: &Mat, target: &Mat, mask: &Mat) -> Result<Vec<f64>> {
    Ok(masked_column_mean(pred, target, mask, |e| e * e)?
        .into_iter()
        .map(f64::sqrt)
        .collect())
}

pub fn mae(pred: &Mat, target: &Mat, mask: &Mat) -> Result<Vec<f64>> {
    masked_column_mean(pred, target, mask, f64::abs)
}

/// RMSE pooled over every observed entry of every column.
pub fn pooled_rmse(pred: &Mat, target: &Mat, mask: &Mat) -> Result<f64> {
    check_shapes(pred, target, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..pred.data.len() {
        if mask.data[i] > 0.0 {
            let e = pred.data[i] - target.data[i];
            sum += e * e;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { (sum / n as f64).sqrt() })
}

/// Sample CRPS: `mean|X − y| − ½·mean|X − X'|` with the second mean over all
/// `n²` ordered pairs (the plain plug-in estimator of the empirical law).
/// Computed in `O(n log n)` from the sorted sample.
pub fn crps_empirical(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("CRPS needs at least one sample".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) || !y.is_finite() {
        return Err(Error::Domain("CRPS inputs must be finite".into()));
    }
    let n = samples.len() as f64;
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let abs_dev: f64 = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    // Σ_{i,j}|x_i − x_j| = 2 Σ_i (2i − n + 1) x_(i)
    let spread: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum::<f64>()
        * 2.0
        / (n * n);
    Ok((abs_dev - 0.5 * spread).max(0.0))
}

/// Closed-form CRPS of `N(μ, σ²)` at `y`.
pub fn gaussian_crps(mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2));
    sigma * (z * (2.0 * cdf - 1.0) + 2.0 * phi - 1.0 / std::f64::consts::PI.sqrt())
}

/// Monte-Carlo standard error of [`crps_empirical`], from its first-order
/// (Hoeffding) projection `h(x) = |x − y| − mean_j|x − x_j|`.
pub fn crps_standard_error(samples: &[f64], y: f64) -> f64 {
    let n = samples.len();
    if n < 2 {
        return f64::INFINITY;
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let total: f64 = xs.iter().sum();
    let mut prefix = 0.0;
    let nf = n as f64;
    let h: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            // mean_j |x − x_j| from prefix sums
            let below = i as f64 * x - prefix;
            let above = (total - prefix - x) - (nf - i as f64 - 1.0) * x;
            prefix += x;
            (x - y).abs() - (below + above) / nf
        })
        .collect();
    let mean = h.iter().sum::<f64>() / nf;
    let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    (var / nf).sqrt()
}

/// Dynamic time warping with absolute-difference local cost over the full
/// window (no band). Quadratic time, linear memory.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("DTW needs nonempty sequences".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = (x - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Holds every state variable at its last observed context value, standardized
/// (`H×S`). A variable the context never observes is held at the training
/// mean.
pub fn persistence_baseline(data: &WindowData, stats: &StandardizationStats, state_vars: &[usize]) -> Result<Mat> {
    let h = data.targets.steps;
    let mut out = Mat::zeros(h, state_vars.len());
    for (k, &j) in state_vars.iter().enumerate() {
        let z = data.last_observed[j].map_or(0.0, |last| stats.standardize(j, last));
        for t in 0..h {
            out.set(t, k, z);
        }
    }
    Ok(out)
}

/// Raw difficulty components of one window: persistence RMSE, within-window
/// standard deviation of the rollout targets and the largest excursion range,
/// all standardized and averaged over state variables.
pub fn difficulty_components(data: &WindowData, persistence: &Mat) -> Result<[f64; 3]> {
    let tgt = &data.targets;
    let pr = rmse(persistence, &tgt.y, &tgt.mask)?;
    let s = tgt.y.cols;
    let (mut sd_sum, mut range_sum) = (0.0, 0.0);
    for k in 0..s {
        let vals: Vec<f64> = (0..tgt.steps).filter(|&t| tgt.mask.at(t, k) > 0.0).map(|t| tgt.y.at(t, k)).collect();
        if vals.is_empty() {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        sd_sum += (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        range_sum += hi - lo;
    }
    let mean_pr = finite_mean(&pr);
    Ok([mean_pr, sd_sum / s as f64, range_sum / s as f64])
}

/// Sum of the three z-scored components over a population of windows. A
/// component with zero spread contributes 0.
pub fn difficulty_scores(components: &[[f64; 3]]) -> Result<Vec<f64>> {
    if components.is_empty() {
        return Err(Error::Population { requested: 1, population: 0 });
    }
    let n = components.len() as f64;
    let mut scores = vec![0.0; components.len()];
    for c in 0..3 {
        let mean = components.iter().map(|v| v[c]).sum::<f64>() / n;
        let sd = (components.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            for (s, v) in scores.iter_mut().zip(components) {
                *s += (v[c] - mean) / sd;
            }
        }
    }
    Ok(scores)
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Population { requested: 2, population: values.len() });
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("bad bootstrap settings: {resamples} resamples, level {level}")));
    }
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Ok((quantile_sorted(&means, tail), quantile_sorted(&means, 1.0 - tail)))
}

fn finite_mean(xs: &[f64]) -> f64 {
    let v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
}

/// Per-window, per-variable metric values over the first `h` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowMetrics {
    /// Indexed `[variable]`.
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
    pub crps: Vec<f64>,
    pub nll: Vec<f64>,
    pub dtw: Vec<f64>,
    /// Pooled over variables.
    pub rmse_all: f64,
}

/// Everything needed to score one window at any prefix.
#[derive(Debug, Clone)]
pub struct ScoredWindow {
    /// `H×S` standardized point prediction.
    pub point: Mat,
    /// `[t][k]` standardized predictive samples.
    pub samples: Vec<Vec<Vec<f64>>>,
    /// `H×S` NLL per entry in standardized units.
    pub nll: Mat,
}

/// Standardized point forecast, samples and per-entry NLL of a model rollout.
pub fn score_trajectory(sim: &Simulator, traj: &Trajectory, data: &WindowData, n_samples: usize, seed: u64) -> Result<ScoredWindow> {
    let stats = &sim.checkpoint.stats;
    let roles = &sim.model.roles;
    let point = point_prediction(&sim.model, stats, traj);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(traj.steps);
    let mut nll = Mat::zeros(traj.steps, roles.n_state());
    for t in 0..traj.steps {
        let dist = sim.step_distribution(traj, t);
        let mut row = Vec::with_capacity(dist.vars.len());
        for (k, v) in dist.vars.iter().enumerate() {
            v.validate().map_err(|e| Error::numeric(format!("rollout step {t}"), e.to_string()))?;
            let j = roles.state[k];
            row.push((0..n_samples).map(|_| stats.standardize(j, v.draw(&mut rng))).collect());
            if data.targets.mask.at(t, k) > 0.0 {
                let x = data.targets.raw.at(t, k);
                let raw_nll = v.nll(x)?;
                // continuous branch carries the standardization Jacobian
                let jac = if v.pi.is_some() && x.abs() < ZERO_THRESHOLD { 0.0 } else { stats.vars[j].sd.ln() };
                nll.set(t, k, raw_nll - jac);
            }
        }
        samples.push(row);
    }
    Ok(ScoredWindow { point, samples, nll })
}

/// Deterministic point forecast scored as a point mass (CRPS = absolute error,
/// NLL undefined).
pub fn score_point(point: Mat) -> ScoredWindow {
    let samples = (0..point.rows).map(|t| point.row(t).iter().map(|&x| vec![x]).collect()).collect();
    let nll = Mat::filled(point.rows, point.cols, f64::NAN);
    ScoredWindow { point, samples, nll }
}

/// Metrics of a scored window over its first `h` steps.
pub fn window_metrics(scored: &ScoredWindow, data: &WindowData, h: usize) -> Result<WindowMetrics> {
    let tgt = &data.targets;
    if h == 0 || h > tgt.steps || h > scored.point.rows {
        return Err(Error::Range(format!("prefix {h} outside 1..={}", tgt.steps.min(scored.point.rows))));
    }
    let prefix = |m: &Mat| Mat::from_vec(h, m.cols, m.data[..h * m.cols].to_vec());
    let (p, y, mask) = (prefix(&scored.point), prefix(&tgt.y), prefix(&tgt.mask));
    let s = p.cols;
    let mut crps = vec![0.0; s];
    let mut nll = vec![0.0; s];
    let mut dtw_v = vec![0.0; s];
    for k in 0..s {
        let obs: Vec<usize> = (0..h).filter(|&t| mask.at(t, k) > 0.0).collect();
        if obs.is_empty() {
            crps[k] = f64::NAN;
            nll[k] = f64::NAN;
            dtw_v[k] = f64::NAN;
            continue;
        }
        let mut c = 0.0;
        let mut l = 0.0;
        for &t in &obs {
            c += crps_empirical(&scored.samples[t][k], y.at(t, k))?;
            l += scored.nll.at(t, k);
        }
        crps[k] = c / obs.len() as f64;
        nll[k] = l / obs.len() as f64;
        let a: Vec<f64> = obs.iter().map(|&t| p.at(t, k)).collect();
        let b: Vec<f64> = obs.iter().map(|&t| y.at(t, k)).collect();
        dtw_v[k] = dtw(&a, &b)?;
    }
    Ok(WindowMetrics {
        rmse: rmse(&p, &y, &mask)?,
        mae: mae(&p, &y, &mask)?,
        crps,
        nll,
        dtw: dtw_v,
        rmse_all: pooled_rmse(&p, &y, &mask)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub rmse: f64,
    pub mae: f64,
    pub crps: f64,
    pub nll: Option<f64>,
    pub dtw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMetrics {
    pub variable: String,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub windows: usize,
    pub per_variable: Vec<VariableMetrics>,
    /// Means over variables of the per-variable values.
    pub aggregate: MetricSet,
    /// Mean over windows of RMSE pooled across variables.
    pub pooled_rmse: f64,
    pub rmse_ci: Interval,
    pub crps_ci: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub model: String,
    /// Always "standardized".
    pub metric_space: String,
    pub windows: usize,
    pub window_starts: Vec<usize>,
    pub horizons: Vec<HorizonMetrics>,
}

fn opt(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Aggregates already-scored windows over a horizon grid.
pub fn report_from_scored(
    label: &str,
    variables: &[String],
    items: &[&WindowData],
    scored: &[ScoredWindow],
    grid: &[usize],
    seed: u64,
) -> Result<MetricReport> {
    if items.is_empty() || items.len() != scored.len() {
        return Err(Error::Population { requested: scored.len().max(1), population: items.len() });
    }
    let s = variables.len();
    let mut horizons = Vec::with_capacity(grid.len());
    for &h in grid {
        let per: Vec<WindowMetrics> = items
            .iter()
            .zip(scored)
            .map(|(d, sc)| window_metrics(sc, d, h))
            .collect::<Result<_>>()?;
        let col = |f: &dyn Fn(&WindowMetrics) -> f64| finite_mean(&per.iter().map(f).collect::<Vec<_>>());
        let per_variable: Vec<VariableMetrics> = (0..s)
            .map(|k| VariableMetrics {
                variable: variables[k].clone(),
                metrics: MetricSet {
                    rmse: col(&|m| m.rmse[k]),
                    mae: col(&|m| m.mae[k]),
                    crps: col(&|m| m.crps[k]),
                    nll: opt(col(&|m| m.nll[k])),
                    dtw: col(&|m| m.dtw[k]),
                },
            })
            .collect();
        let over_vars = |f: &dyn Fn(&MetricSet) -> f64| finite_mean(&per_variable.iter().map(|v| f(&v.metrics)).collect::<Vec<_>>());
        let aggregate = MetricSet {
            rmse: over_vars(&|m| m.rmse),
            mae: over_vars(&|m| m.mae),
            crps: over_vars(&|m| m.crps),
            nll: opt(over_vars(&|m| m.nll.unwrap_or(f64::NAN))),
            dtw: over_vars(&|m| m.dtw),
        };
        let window_rmse: Vec<f64> = per.iter().map(|m| finite_mean(&m.rmse)).collect();
        let window_crps: Vec<f64> = per.iter().map(|m| finite_mean(&m.crps)).collect();
        let ci = |v: &[f64], salt: u64| -> Result<Interval> {
            if v.len() < 2 {
                let x = finite_mean(v);
                return Ok(Interval { lo: x, hi: x });
            }
            let (lo, hi) = bootstrap_ci(v, BOOTSTRAP_RESAMPLES, 0.95, seed ^ salt ^ (h as u64) << 8)?;
            Ok(Interval { lo, hi })
        };
        horizons.push(HorizonMetrics {
            horizon: h,
            windows: items.len(),
            per_variable,
            aggregate,
            pooled_rmse: col(&|m| m.rmse_all),
            rmse_ci: ci(&window_rmse, 1)?,
            crps_ci: ci(&window_crps, 2)?,
        });
    }
    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: label.to_string(),
        metric_space: "standardized".into(),
        windows: items.len(),
        window_starts: items.iter().map(|d| d.window.start).collect(),
        horizons,
    })
}

/// Grid `step, 2·step, …` up to and including `max` (always ends at `max`).
pub fn horizon_grid(max: usize, step: usize) -> Vec<usize> {
    if step == 0 || max == 0 {
        return vec![max];
    }
    let mut g: Vec<usize> = (1..=max / step).map(|i| i * step).collect();
    if g.last() != Some(&max) {
        g.push(max);
    }
    g
}

/// Names of the state variables in model order.
pub fn state_names(sim: &Simulator) -> Vec<String> {
    sim.model.roles.state.iter().map(|&j| sim.checkpoint.schema.variables[j].name.clone()).collect()
}

/// Model and persistence scores for prepared windows (one rollout each).
pub fn score_windows(sim: &Simulator, items: &[&WindowData], n_samples: usize, seed: u64) -> Result<(Vec<ScoredWindow>, Vec<ScoredWindow>)> {
    let trajs = sim.run(items)?;
    let state = sim.checkpoint.schema.indices(VariableKind::State);
    let mut model = Vec::with_capacity(items.len());
    let mut base = Vec::with_capacity(items.len());
    for (i, (d, tr)) in items.iter().zip(&trajs).enumerate() {
        model.push(score_trajectory(sim, tr, d, n_samples, seed.wrapping_add(d.window.start as u64).wrapping_mul(0x9E37_79B9).wrapping_add(i as u64))?);
        base.push(score_point(persistence_baseline(d, &sim.checkpoint.stats, &state)?));
    }
    Ok((model, base))
}

/// Metric reports of the model and of persistence over a horizon grid, from
/// one rollout per window at the largest horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub model: MetricReport,
    pub persistence: MetricReport,
}

pub fn horizon_sweep(sim: &Simulator, items: &[&WindowData], grid: &[usize], n_samples: usize, seed: u64) -> Result<SweepReport> {
    let max = grid.iter().copied().max().ok_or_else(|| Error::Config("empty horizon grid".into()))?;
    if let Some(d) = items.iter().find(|d| d.targets.steps < max) {
        return Err(Error::Range(format!("window {} has horizon {} < {max}", d.window.start, d.targets.steps)));
    }
    let names = state_names(sim);
    let (m, p) = score_windows(sim, items, n_samples, seed)?;
    Ok(SweepReport {
        model: report_from_scored(&sim.checkpoint.ablation.label(), &names, items, &m, grid, seed)?,
        persistence: report_from_scored("persistence", &names, items, &p, grid, seed)?,
    })
}

pub fn evaluate(sim: &Simulator, items: &[&WindowData], n_samples: usize, seed: u64) -> Result<SweepReport> {
    let h = items.first().map(|d| d.targets.steps).ok_or(Error::Population { requested: 1, population: 0 })?;
    horizon_sweep(sim, items, &[h], n_samples, seed)
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat table: one row per horizon and variable, plus an `ALL` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["model", "horizon", "variable", "rmse", "mae", "crps", "nll", "dtw", "rmse_lo", "rmse_hi", "windows"])
            .map_err(err)?;
        let f = |x: f64| if x.is_finite() { format!("{x:.6}") } else { String::new() };
        for h in &self.horizons {
            let rows = h
                .per_variable
                .iter()
                .map(|v| (v.variable.as_str(), &v.metrics))
                .chain(std::iter::once(("ALL", &h.aggregate)));
            for (name, m) in rows {
                w.write_record([
                    self.model.clone(),
                    h.horizon.to_string(),
                    name.to_string(),
                    f(m.rmse),
                    f(m.mae),
                    f(m.crps),
                    f(m.nll.unwrap_or(f64::NAN)),
                    f(m.dtw),
                    f(h.rmse_ci.lo),
                    f(h.rmse_ci.hi),
                    h.windows.to_string(),
                ])
                .map_err(err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn at(&self, horizon: usize) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|h| h.horizon == horizon)
    }
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        let m = self.model.to_csv()?;
        let p = self.persistence.to_csv()?;
        // drop the second header
        Ok(m + p.split_once('\n').map(|x| x.1).unwrap_or(""))
    }
}
