//! Context tokenization and encoding into a belief state, plus the three
//! rollout encoders over future drivers.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Graph, Model, ModelConfig, Roles, TcnIds, TEMPORAL_FEATURES, VAR_FEATURES};
use crate::series::{StandardizationStats, TypedSeries, Window};
use crate::tape::Var;
use crate::tensor::Mat;

const DAY: f64 = 1440.0;
const WEEK: f64 = 7.0 * DAY;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Value = 0,
    Belief = 1,
    Mask = 2,
    LogAge = 3,
    Rate = 4,
}

/// Tokenized context: one numeric row per step plus categorical lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub steps: usize,
    pub numeric: Mat,
    /// Per categorical variable, per step: embedding row (cardinality = unknown).
    pub cat_codes: Vec<Vec<usize>>,
    /// Per categorical variable, per step: weight of the known embedding.
    pub cat_weights: Vec<Vec<f64>>,
}

impl TokenSequence {
    /// Feature of the `i`-th continuous variable (schema order, categoricals skipped).
    pub fn feature(&self, step: usize, i: usize, f: Feature) -> f64 {
        self.numeric.at(step, VAR_FEATURES * i + f as usize)
    }

    pub fn temporal(&self, step: usize, k: usize) -> f64 {
        let base = self.numeric.cols - TEMPORAL_FEATURES - 2 * self.cat_codes.len();
        self.numeric.at(step, base + k)
    }
}

pub fn temporal_features(t: f64, dt_eff: f64) -> [f64; TEMPORAL_FEATURES] {
    use std::f64::consts::TAU;
    let day = TAU * t.rem_euclid(DAY) / DAY;
    let week = TAU * t.rem_euclid(WEEK) / WEEK;
    [dt_eff, day.sin(), day.cos(), week.sin(), week.cos()]
}

fn check_stats(series: &TypedSeries, stats: &StandardizationStats) -> Result<Roles> {
    if stats.vars.len() != series.n_vars() {
        return Err(Error::Schema(format!(
            "statistics cover {} variables, series has {}",
            stats.vars.len(),
            series.n_vars()
        )));
    }
    Roles::from_schema(series.schema())
}

/// Tokenizes the context slice of `window`.
pub fn tokenize(series: &TypedSeries, window: &Window, stats: &StandardizationStats, config: &ModelConfig) -> Result<TokenSequence> {
    tokenize_range(series, window.context_range(), stats, config)
}

pub fn tokenize_range(
    series: &TypedSeries,
    range: Range<usize>,
    stats: &StandardizationStats,
    config: &ModelConfig,
) -> Result<TokenSequence> {
    if range.end > series.len() || range.is_empty() {
        return Err(Error::Range(format!(
            "context rows {range:?} outside series of length {}",
            series.len()
        )));
    }
    let roles = check_stats(series, stats)?;
    let steps = range.len();
    let width = roles.context_numeric_width();
    let mut numeric = Mat::zeros(steps, width);
    let n_cat = roles.categorical.len();
    let mut cat_codes = vec![vec![0usize; steps]; n_cat];
    let mut cat_weights = vec![vec![0.0; steps]; n_cat];
    let ts = series.timestamps();
    let t_start = ts[range.start];
    let clip = config.clip;

    // running per-variable memory: last standardized value, its time, previous (value, time)
    let mut last: Vec<Option<(f64, f64)>> = vec![None; roles.continuous.len()];
    let mut prev: Vec<Option<(f64, f64)>> = vec![None; roles.continuous.len()];
    let mut last_cat: Vec<Option<(usize, f64)>> = vec![None; n_cat];

    for (step, row) in range.clone().enumerate() {
        let t = ts[row];
        let out = numeric.row_mut(step);
        for (i, &j) in roles.continuous.iter().enumerate() {
            if let Some(x) = series.get(row, j) {
                let z = stats.standardize(j, x);
                if !z.is_finite() {
                    return Err(Error::numeric(
                        format!("tokenize row {row}"),
                        format!("variable {} standardizes to {z}", series.schema().variables[j].name),
                    ));
                }
                prev[i] = last[i];
                last[i] = Some((z.clamp(-clip, clip), t));
            }
            let f = &mut out[VAR_FEATURES * i..VAR_FEATURES * (i + 1)];
            let observed = series.is_observed(row, j);
            match last[i] {
                Some((z, t_obs)) => {
                    let age = t - t_obs;
                    f[Feature::Value as usize] = if observed { z } else { 0.0 };
                    f[Feature::Belief as usize] = z * (-age / config.belief_tau).exp();
                    f[Feature::LogAge as usize] = age.ln_1p();
                    f[Feature::Rate as usize] = match prev[i] {
                        Some((zp, tp)) => ((z - zp) / ((t_obs - tp) / config.dt_ref)).clamp(-clip, clip),
                        None => 0.0,
                    };
                }
                None => {
                    f[Feature::LogAge as usize] = (t - t_start).ln_1p();
                }
            }
            f[Feature::Mask as usize] = if observed { 1.0 } else { 0.0 };
        }
        let dt = if row == 0 { config.dt_ref } else { series.dt(row) };
        let base = VAR_FEATURES * roles.continuous.len();
        out[base..base + TEMPORAL_FEATURES].copy_from_slice(&temporal_features(t, config.dt_eff(dt)));
        let cbase = base + TEMPORAL_FEATURES;
        for (c, &j) in roles.categorical.iter().enumerate() {
            let card = roles.cardinality[c];
            if let Some(code) = series.get(row, j) {
                let code = code as usize;
                if code >= card {
                    return Err(Error::Range(format!("categorical code {code} ≥ cardinality {card}")));
                }
                last_cat[c] = Some((code, t));
            }
            let observed = series.is_observed(row, j);
            out[cbase + 2 * c] = if observed { 1.0 } else { 0.0 };
            match last_cat[c] {
                Some((code, t_obs)) => {
                    let age = t - t_obs;
                    out[cbase + 2 * c + 1] = age.ln_1p();
                    cat_codes[c][step] = code;
                    cat_weights[c][step] = (-age / config.belief_tau).exp();
                }
                None => {
                    out[cbase + 2 * c + 1] = (t - t_start).ln_1p();
                    cat_codes[c][step] = card;
                    cat_weights[c][step] = 0.0;
                }
            }
        }
    }
    Ok(TokenSequence {
        steps,
        numeric,
        cat_codes,
        cat_weights,
    })
}

/// Future drivers in original units: one column per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDrivers {
    pub timestamps: Vec<f64>,
    /// Timestamp of the row preceding the first driver row.
    pub prev_time: f64,
    pub controls: Vec<Vec<f64>>,
    pub exogenous: Vec<Vec<f64>>,
    pub categorical: Vec<Vec<usize>>,
}

fn hold_last(series: &TypedSeries, var: usize, range: Range<usize>) -> Result<Vec<f64>> {
    let mut current = (0..range.start).rev().find_map(|r| series.get(r, var));
    range
        .clone()
        .map(|row| {
            if let Some(x) = series.get(row, var) {
                current = Some(x);
            }
            current.ok_or_else(|| {
                Error::Plan(format!(
                    "driver `{}` has no observation at or before row {row}",
                    series.schema().variables[var].name
                ))
            })
        })
        .collect()
}

impl RawDrivers {
    /// Drivers recorded over the rollout; gaps hold the last observed value.
    pub fn observed(series: &TypedSeries, window: &Window) -> Result<Self> {
        let range = window.rollout_range();
        if range.end > series.len() || range.start == 0 {
            return Err(Error::Range(format!(
                "rollout rows {range:?} outside series of length {}",
                series.len()
            )));
        }
        let roles = Roles::from_schema(series.schema())?;
        let col = |vars: &[usize]| -> Result<Vec<Vec<f64>>> {
            vars.iter().map(|&j| hold_last(series, j, range.clone())).collect()
        };
        Ok(RawDrivers {
            timestamps: series.timestamps()[range.clone()].to_vec(),
            prev_time: series.timestamps()[range.start - 1],
            controls: col(&roles.control)?,
            exogenous: col(&roles.exogenous)?,
            categorical: col(&roles.categorical)?
                .into_iter()
                .map(|c| c.into_iter().map(|x| x as usize).collect())
                .collect(),
        })
    }

    pub fn steps(&self) -> usize {
        self.timestamps.len()
    }
}

/// Standardized future drivers ready for the rollout encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverFrame {
    pub steps: usize,
    pub dt_eff: Vec<f64>,
    pub controls: Mat,
    pub exogenous: Mat,
    pub temporal: Mat,
    pub cat_codes: Vec<Vec<usize>>,
}

impl DriverFrame {
    pub fn new(raw: &RawDrivers, stats: &StandardizationStats, roles: &Roles, config: &ModelConfig) -> Result<Self> {
        let steps = raw.steps();
        if raw.controls.len() != roles.control.len()
            || raw.exogenous.len() != roles.exogenous.len()
            || raw.categorical.len() != roles.categorical.len()
        {
            return Err(Error::Plan("driver columns do not match the schema".into()));
        }
        let standardize = |vars: &[usize], cols: &[Vec<f64>], kind: &str| -> Result<Mat> {
            let mut m = Mat::zeros(steps, vars.len());
            for (c, (&j, col)) in vars.iter().zip(cols).enumerate() {
                if col.len() != steps {
                    return Err(Error::Plan(format!(
                        "{kind} column {c} has {} steps, expected {steps}",
                        col.len()
                    )));
                }
                for (t, &x) in col.iter().enumerate() {
                    if !x.is_finite() {
                        return Err(Error::Plan(format!("{kind} column {c} is missing a value at step {t}")));
                    }
                    m.set(t, c, stats.standardize(j, x).clamp(-config.clip, config.clip));
                }
            }
            Ok(m)
        };
        let controls = standardize(&roles.control, &raw.controls, "control")?;
        let exogenous = standardize(&roles.exogenous, &raw.exogenous, "exogenous")?;
        for (c, col) in raw.categorical.iter().enumerate() {
            if col.len() != steps {
                return Err(Error::Plan(format!("categorical column {c} has wrong length")));
            }
            if let Some(&bad) = col.iter().find(|&&k| k >= roles.cardinality[c]) {
                return Err(Error::Plan(format!("categorical code {bad} out of range")));
            }
        }
        let mut dt_eff = Vec::with_capacity(steps);
        let mut temporal = Mat::zeros(steps, TEMPORAL_FEATURES);
        let mut prev = raw.prev_time;
        for (t, &ts) in raw.timestamps.iter().enumerate() {
            let dt = ts - prev;
            if !(dt > 0.0) {
                return Err(Error::Plan(format!("non-increasing driver timestamp at step {t}")));
            }
            let e = config.dt_eff(dt);
            dt_eff.push(e);
            temporal.row_mut(t).copy_from_slice(&temporal_features(ts, e));
            prev = ts;
        }
        Ok(DriverFrame {
            steps,
            dt_eff,
            controls,
            exogenous,
            temporal,
            cat_codes: raw.categorical.clone(),
        })
    }

    pub fn slice(&self, range: Range<usize>) -> DriverFrame {
        let rows = |m: &Mat| {
            Mat::from_vec(
                range.len(),
                m.cols,
                m.data[range.start * m.cols..range.end * m.cols].to_vec(),
            )
        };
        DriverFrame {
            steps: range.len(),
            dt_eff: self.dt_eff[range.clone()].to_vec(),
            controls: rows(&self.controls),
            exogenous: rows(&self.exogenous),
            temporal: rows(&self.temporal),
            cat_codes: self.cat_codes.iter().map(|c| c[range.clone()].to_vec()).collect(),
        }
    }
}

fn stack(mats: &[&Mat]) -> Mat {
    let cols = mats[0].cols;
    let mut data = Vec::with_capacity(mats.iter().map(|m| m.len()).sum());
    for m in mats {
        assert_eq!(m.cols, cols);
        data.extend_from_slice(&m.data);
    }
    Mat::from_vec(data.len() / cols.max(1), cols, data)
}

fn stack_cols(cols: &[&Mat], rows: usize) -> Mat {
    if cols.is_empty() || cols[0].cols == 0 {
        return Mat::zeros(rows, 0);
    }
    stack(cols)
}

/// Several context windows stacked batch-major.
#[derive(Debug, Clone)]
pub struct ContextBatch {
    pub batch: usize,
    pub steps: usize,
    pub numeric: Mat,
    pub cat_codes: Vec<Vec<usize>>,
    pub cat_weights: Vec<Vec<f64>>,
    /// Final token row of each window.
    pub last: Mat,
}

impl ContextBatch {
    pub fn new(items: &[&TokenSequence]) -> Self {
        let steps = items[0].steps;
        assert!(items.iter().all(|t| t.steps == steps), "context lengths differ");
        let numeric = stack(&items.iter().map(|t| &t.numeric).collect::<Vec<_>>());
        let n_cat = items[0].cat_codes.len();
        let cat_codes = (0..n_cat)
            .map(|c| items.iter().flat_map(|t| t.cat_codes[c].iter().copied()).collect())
            .collect();
        let cat_weights = (0..n_cat)
            .map(|c| items.iter().flat_map(|t| t.cat_weights[c].iter().copied()).collect())
            .collect();
        let mut last = Mat::zeros(items.len(), numeric.cols);
        for (b, t) in items.iter().enumerate() {
            last.row_mut(b).copy_from_slice(t.numeric.row(steps - 1));
        }
        ContextBatch {
            batch: items.len(),
            steps,
            numeric,
            cat_codes,
            cat_weights,
            last,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DriverBatch {
    pub batch: usize,
    pub steps: usize,
    pub dt_eff: Mat,
    pub controls: Mat,
    pub exogenous: Mat,
    pub temporal: Mat,
    pub cat_codes: Vec<Vec<usize>>,
}

impl DriverBatch {
    pub fn new(items: &[&DriverFrame]) -> Self {
        let steps = items[0].steps;
        assert!(items.iter().all(|d| d.steps == steps), "horizons differ");
        let rows = items.len() * steps;
        DriverBatch {
            batch: items.len(),
            steps,
            dt_eff: Mat::col_vec(items.iter().flat_map(|d| d.dt_eff.iter().copied()).collect()),
            controls: stack_cols(&items.iter().map(|d| &d.controls).collect::<Vec<_>>(), rows),
            exogenous: stack_cols(&items.iter().map(|d| &d.exogenous).collect::<Vec<_>>(), rows),
            temporal: stack(&items.iter().map(|d| &d.temporal).collect::<Vec<_>>()),
            cat_codes: (0..items[0].cat_codes.len())
                .map(|c| items.iter().flat_map(|d| d.cat_codes[c].iter().copied()).collect())
                .collect(),
        }
    }

    /// Rows `range` of every batch item.
    pub fn slice_steps(&self, range: Range<usize>) -> DriverBatch {
        let idx: Vec<usize> = (0..self.batch)
            .flat_map(|b| range.clone().map(move |t| b * self.steps + t))
            .collect();
        let take = |m: &Mat| {
            let mut out = Mat::zeros(idx.len(), m.cols);
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(i).copy_from_slice(m.row(r));
            }
            out
        };
        DriverBatch {
            batch: self.batch,
            steps: range.len(),
            dt_eff: take(&self.dt_eff),
            controls: take(&self.controls),
            exogenous: take(&self.exogenous),
            temporal: take(&self.temporal),
            cat_codes: self
                .cat_codes
                .iter()
                .map(|c| idx.iter().map(|&r| c[r]).collect())
                .collect(),
        }
    }
}

/// Belief state as tape variables, one row per batch item.
#[derive(Debug, Clone, Copy)]
pub struct BeliefVars {
    pub env: Var,
    pub z: Var,
    pub s: Var,
    pub c: Var,
    pub su: Var,
    pub q: Var,
    /// Initial regime weights.
    pub p: Var,
}

/// Plain-valued belief state for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub env: Vec<f64>,
    pub z0: Vec<f64>,
    pub s0: Vec<f64>,
    pub c0: Vec<f64>,
    pub su0: Vec<f64>,
    pub q0: Vec<f64>,
    pub p0: Vec<f64>,
}

impl BeliefState {
    pub fn is_finite(&self) -> bool {
        [&self.env, &self.z0, &self.s0, &self.c0, &self.su0, &self.q0, &self.p0]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

fn embed(g: &mut Graph, table: usize, codes: &[usize], weights: Option<&[f64]>, unknown: usize) -> Var {
    let t = g.p(table);
    let known = g.tape.gather_rows(t, codes.to_vec());
    match weights {
        None => known,
        Some(w) => {
            let unk = g.tape.gather_rows(t, vec![unknown; codes.len()]);
            let diff = g.tape.sub(known, unk);
            let wc = g.tape.constant(Mat::col_vec(w.to_vec()));
            let scaled = g.tape.mul_col(diff, wc);
            g.tape.add(unk, scaled)
        }
    }
}

/// Causal TCN: input projection then residual depthwise-separable GLU blocks.
fn tcn(g: &mut Graph, ids: &TcnIds, x: Var, steps: usize, check: Option<&str>) -> Result<Var> {
    let mut h = g.tape.matmul(x, g.p(ids.in_w));
    h = g.tape.add_row(h, g.p(ids.in_b));
    let channels = g.tape.shape(h).1;
    for (i, blk) in ids.blocks.iter().enumerate() {
        let y = g.tape.depthwise_conv(h, g.p(blk.taps), blk.dilation, steps);
        let y = g.tape.add_row(y, g.p(blk.taps_b));
        let u = g.tape.matmul(y, g.p(blk.pw_w));
        let u = g.tape.add_row(u, g.p(blk.pw_b));
        let a = g.tape.slice_cols(u, 0, channels);
        let gate = g.tape.slice_cols(u, channels, channels);
        let gate = g.tape.sigmoid(gate);
        let out = g.tape.mul(a, gate);
        h = g.tape.add(h, out);
        if let Some(name) = check {
            if !g.tape.value(h).all_finite() {
                return Err(Error::numeric(format!("{name} block {i}"), "non-finite activation"));
            }
        }
    }
    Ok(h)
}

/// Context TCN, attention pooling and the typed heads.
pub fn encode_context_graph(g: &mut Graph, model: &Model, ctx: &ContextBatch) -> Result<BeliefVars> {
    let l = &model.layout;
    let mut parts = vec![g.tape.constant(ctx.numeric.clone())];
    for (c, &table) in l.embeds.iter().enumerate() {
        let unknown = model.roles.cardinality[c];
        parts.push(embed(g, table, &ctx.cat_codes[c], Some(&ctx.cat_weights[c]), unknown));
    }
    let x = g.tape.concat_cols(&parts);
    let h = tcn(g, &l.ctx, x, ctx.steps, Some("context encoder"))?;
    let channels = g.tape.shape(h).1;
    let scores = g.tape.matmul(h, g.p(l.pool_q));
    let scores = g.tape.scale(scores, 1.0 / (channels as f64).sqrt());
    let w = g.tape.segment_softmax(scores, ctx.steps);
    let pooled = g.tape.segment_weighted_sum(h, w, ctx.steps);
    let last = g.tape.constant(ctx.last.clone());
    let hcat = g.tape.concat_cols(&[pooled, last]);
    let env = g.affine(hcat, &l.env);
    let z = g.affine(hcat, &l.z0);
    let s = g.affine(hcat, &l.s0);
    let c = g.affine(hcat, &l.c0);
    let su = g.affine(hcat, &l.su0);
    let q = g.affine(hcat, &l.q0);
    let p_logits = g.affine(hcat, &l.p0);
    let p = g.tape.row_softmax(p_logits);
    for (name, v) in [("env", env), ("z0", z), ("s0", s), ("c0", c), ("su0", su)] {
        if !g.tape.value(v).all_finite() {
            return Err(Error::numeric(format!("belief head {name}"), "non-finite activation"));
        }
    }
    Ok(BeliefVars {
        env,
        z,
        s,
        c,
        su,
        q,
        p,
    })
}

/// Per-step outputs of the three rollout encoders.
#[derive(Debug, Clone)]
pub struct DriverVars {
    pub h_dyn: Var,
    pub h_act: Var,
    /// Per-variable forcing tokens, controls first; empty when forcing is ablated.
    pub tokens: Vec<Var>,
    pub n_control: usize,
}

pub fn encode_drivers_graph(g: &mut Graph, model: &Model, d: &DriverBatch) -> Result<DriverVars> {
    let l = &model.layout;
    let cats: Vec<Var> = l
        .embeds
        .iter()
        .enumerate()
        .map(|(c, &table)| embed(g, table, &d.cat_codes[c], None, 0))
        .collect();
    let controls = g.tape.constant(d.controls.clone());
    let exo = g.tape.constant(d.exogenous.clone());
    let temporal = g.tape.constant(d.temporal.clone());

    let mut dyn_parts = vec![exo, temporal];
    dyn_parts.extend(&cats);
    let dyn_in = g.tape.concat_cols(&dyn_parts);
    let h_dyn = tcn(g, &l.dyn_tcn, dyn_in, d.steps, None)?;
    let h_act = tcn(g, &l.act_tcn, controls, d.steps, None)?;

    let mut tokens = Vec::new();
    if !model.ablation.no_forcing {
        let mut force_parts = vec![controls, exo, temporal];
        force_parts.extend(&cats);
        let force_in = g.tape.concat_cols(&force_parts);
        let gctx = tcn(g, &l.force_tcn, force_in, d.steps, None)?;
        let shared = g.tape.matmul(gctx, g.p(l.tok_ctx));
        let n_ctl = d.controls.cols;
        for i in 0..n_ctl + d.exogenous.cols {
            let (src, col) = if i < n_ctl { (controls, i) } else { (exo, i - n_ctl) };
            let x = g.tape.slice_cols(src, col, 1);
            let proj = g.tape.matmul(x, g.p(l.tok_in[i]));
            let pre = g.tape.add(proj, shared);
            let pre = g.tape.add_row(pre, g.p(l.tok_bias[i]));
            tokens.push(g.tape.tanh(pre));
        }
    }
    Ok(DriverVars {
        h_dyn,
        h_act,
        tokens,
        n_control: d.controls.cols,
    })
}

/// Plain-valued context encoding of a single window.
pub fn encode_context(model: &Model, store: &crate::params::ParamStore, tokens: &TokenSequence) -> Result<BeliefState> {
    let mut g = Graph::new(store, false);
    let batch = ContextBatch::new(&[tokens]);
    let b = encode_context_graph(&mut g, model, &batch)?;
    let row = |v: Var| g.tape.value(v).data.clone();
    Ok(BeliefState {
        env: row(b.env),
        z0: row(b.z),
        s0: row(b.s),
        c0: row(b.c),
        su0: row(b.su),
        q0: row(b.q),
        p0: row(b.p),
    })
}

/// Plain-valued rollout-encoder outputs `(h_dyn, forcing tokens, h_actslow)`.
pub fn encode_rollout_drivers(
    model: &Model,
    store: &crate::params::ParamStore,
    drivers: &DriverFrame,
) -> Result<(Mat, Vec<Mat>, Mat)> {
    let mut g = Graph::new(store, false);
    let batch = DriverBatch::new(&[drivers]);
    let d = encode_drivers_graph(&mut g, model, &batch)?;
    Ok((
        g.tape.value(d.h_dyn).clone(),
        d.tokens.iter().map(|&t| g.tape.value(t).clone()).collect(),
        g.tape.value(d.h_act).clone(),
    ))
}
