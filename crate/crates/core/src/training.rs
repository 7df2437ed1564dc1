//! Composite objective and the training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::WindowData;
use crate::dynamics::{forward_graph, semigroup_penalty_graph, RolloutVars};
use crate::encoder::{BeliefVars, ContextBatch, DriverBatch};
use crate::error::{Error, Result};
use crate::model::{Ablation, Graph, Model, ModelConfig};
use crate::params::{seeded_rng, AdamW, AdamWConfig, ParamStore};
use crate::series::{eligible_starts, split_index, StandardizationStats, TypedSeries, Window};
use crate::tape::{Unary, Var};
use crate::tensor::Mat;

/// `w(t) = 0.2 + 2 (t/H)²` for `0 ≤ t ≤ H`.
pub fn time_weight(t: usize, horizon: usize) -> Result<f64> {
    if horizon == 0 || t > horizon {
        return Err(Error::Range(format!("time weight needs 0 ≤ t ≤ H, got t = {t}, H = {horizon}")));
    }
    let r = t as f64 / horizon as f64;
    Ok(0.2 + 2.0 * r * r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub nll: f64,
    pub hurdle_bce: f64,
    pub semigroup: f64,
    /// Probability that a batch evaluates the semigroup term.
    pub semigroup_prob: f64,
    pub innovation: f64,
    pub action_aux: f64,
    pub smoothness: f64,
    pub tv: f64,
    pub kl_usage: f64,
    pub stick_breaking: f64,
    pub entropy: f64,
    pub tail_multiplier: f64,
    /// Concentration of the stick-breaking prior on regime usage.
    pub stick_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            nll: 1.0,
            hurdle_bce: 0.60,
            semigroup: 0.20,
            semigroup_prob: 0.10,
            innovation: 0.18,
            action_aux: 0.20,
            smoothness: 2e-3,
            tv: 0.05,
            kl_usage: 0.01,
            stick_breaking: 0.01,
            entropy: 0.01,
            tail_multiplier: 3.0,
            stick_alpha: 2.0,
        }
    }
}

impl LossWeights {
    pub fn only_nll() -> Self {
        LossWeights {
            nll: 1.0,
            hurdle_bce: 0.0,
            semigroup: 0.0,
            semigroup_prob: 0.0,
            innovation: 0.0,
            action_aux: 0.0,
            smoothness: 0.0,
            tv: 0.0,
            kl_usage: 0.0,
            stick_breaking: 0.0,
            entropy: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.nll,
            self.hurdle_bce,
            self.semigroup,
            self.semigroup_prob,
            self.innovation,
            self.action_aux,
            self.smoothness,
            self.tv,
            self.kl_usage,
            self.stick_breaking,
            self.entropy,
            self.tail_multiplier,
        ];
        if all.iter().any(|&w| !(w >= 0.0)) || self.semigroup_prob > 1.0 || !(self.stick_alpha > 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Stacked targets with the per-entry weights of the likelihood terms.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub y: Mat,
    /// Student-t weights: mask × time weight × tail multiplier, zero on hurdle zeros.
    pub w_cont: Mat,
    /// Hurdle columns: weights on `-log π` (zeros) and `-log(1-π)` (positives).
    pub w_zero: Mat,
    pub w_pos: Mat,
    /// Same, without time or tail weighting, for the classification term.
    pub m_zero: Mat,
    pub m_pos: Mat,
    pub n_obs: f64,
    pub n_hurdle_obs: f64,
}

impl TargetBatch {
    /// `flat` drops time and tail weighting (plain likelihood).
    pub fn new(model: &Model, stats: &StandardizationStats, items: &[&WindowData], weights: &LossWeights, flat: bool) -> Result<Self> {
        let roles = &model.roles;
        let s = roles.n_state();
        let nh = roles.hurdle.len().max(1);
        let steps = items[0].targets.steps;
        let rows = items.len() * steps;
        let thresholds: Vec<f64> = roles
            .state
            .iter()
            .map(|&j| {
                let v = &stats.vars[j];
                (v.p95 - v.mean) / v.sd
            })
            .collect();
        let mut y = Mat::zeros(rows, s);
        let mut w_cont = Mat::zeros(rows, s);
        let mut w_zero = Mat::zeros(rows, nh);
        let mut w_pos = Mat::zeros(rows, nh);
        let mut m_zero = Mat::zeros(rows, nh);
        let mut m_pos = Mat::zeros(rows, nh);
        let (mut n_obs, mut n_hurdle_obs) = (0.0, 0.0);
        for (b, item) in items.iter().enumerate() {
            let tf = &item.targets;
            if tf.steps != steps {
                return Err(Error::Domain("windows in a batch must share the horizon".into()));
            }
            for t in 0..steps {
                let r = b * steps + t;
                let tw = if flat { 1.0 } else { time_weight(t + 1, steps)? };
                for k in 0..s {
                    if tf.mask.at(t, k) == 0.0 {
                        continue;
                    }
                    n_obs += 1.0;
                    let yk = tf.y.at(t, k);
                    y.set(r, k, yk);
                    let tail = if !flat && yk > thresholds[k] { weights.tail_multiplier } else { 1.0 };
                    let w = tw * tail;
                    match roles.hurdle.iter().position(|&h| h == k) {
                        Some(h) => {
                            n_hurdle_obs += 1.0;
                            if tf.is_zero(t, k) {
                                w_zero.set(r, h, w);
                                m_zero.set(r, h, 1.0);
                            } else {
                                w_pos.set(r, h, w);
                                m_pos.set(r, h, 1.0);
                                w_cont.set(r, k, w);
                            }
                        }
                        None => w_cont.set(r, k, w),
                    }
                }
            }
        }
        if n_obs == 0.0 {
            return Err(Error::Domain("batch has no observed targets".into()));
        }
        Ok(TargetBatch {
            y,
            w_cont,
            w_zero,
            w_pos,
            m_zero,
            m_pos,
            n_obs,
            n_hurdle_obs,
        })
    }
}

pub const TERM_NAMES: [&str; 10] = [
    "nll",
    "hurdle_bce",
    "semigroup",
    "innovation",
    "tv",
    "kl_usage",
    "stick_breaking",
    "entropy",
    "action_aux",
    "smoothness",
];

pub struct LossGraph {
    pub total: Var,
    /// `(name, weight, unweighted term)` in [`TERM_NAMES`] order.
    pub terms: Vec<(&'static str, f64, Var)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted term values.
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn from_graph(g: &Graph, lg: &LossGraph) -> Self {
        LossBreakdown {
            total: g.tape.scalar(lg.total),
            terms: lg.terms.iter().map(|(n, _, v)| (n.to_string(), g.tape.scalar(*v))).collect(),
            weights: lg.terms.iter().map(|(n, w, _)| (n.to_string(), *w)).collect(),
        }
    }

    /// `Σ weight · term`, recomputed.
    pub fn resum(&self) -> f64 {
        self.terms.iter().map(|(n, v)| self.weights[n] * v).sum()
    }
}

fn zero(g: &mut Graph) -> Var {
    g.tape.constant(Mat::scalar(0.0))
}

fn log_eps(g: &mut Graph, v: Var) -> Var {
    let shifted = g.tape.add_scalar(v, 1e-12);
    g.tape.log(shifted)
}

/// Builds the weighted objective. `semigroup_split` is `None` when the
/// stochastic gate is closed.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss_graph(
    g: &mut Graph,
    model: &Model,
    belief: &BeliefVars,
    r: &RolloutVars,
    drivers: &DriverBatch,
    targets: &TargetBatch,
    weights: &LossWeights,
    semigroup_split: Option<usize>,
    frozen_residual: Option<&Mat>,
) -> Result<LossGraph> {
    let last = *r.last();
    let rows = r.batch * r.steps;
    let has_hurdle = !model.roles.hurdle.is_empty();

    // likelihood
    let tnll = g.tape.student_t_nll(targets.y.clone(), last.mu, last.log_sigma, r.nu, model.config.gaussian);
    let wc = g.tape.constant(targets.w_cont.clone());
    let weighted = g.tape.mul(tnll, wc);
    let mut nll_sum = g.tape.sum_all(weighted);
    let mut bce = zero(g);
    if has_hurdle {
        let neg = g.tape.scale(last.pi_logit, -1.0);
        let neg_log_pi = g.tape.softplus(neg);
        let neg_log_1m = g.tape.softplus(last.pi_logit);
        let hurdle_sum = |w: &Mat, v: Var, g: &mut Graph| {
            let c = g.tape.constant(w.clone());
            let m = g.tape.mul(v, c);
            g.tape.sum_all(m)
        };
        let a = hurdle_sum(&targets.w_zero, neg_log_pi, g);
        let b = hurdle_sum(&targets.w_pos, neg_log_1m, g);
        let zero_part = g.tape.add(a, b);
        nll_sum = g.tape.add(nll_sum, zero_part);
        if targets.n_hurdle_obs > 0.0 {
            let a = hurdle_sum(&targets.m_zero, neg_log_pi, g);
            let b = hurdle_sum(&targets.m_pos, neg_log_1m, g);
            let s = g.tape.add(a, b);
            bce = g.tape.scale(s, 1.0 / targets.n_hurdle_obs);
        }
    }
    let nll = g.tape.scale(nll_sum, 1.0 / targets.n_obs);

    let semigroup = match semigroup_split {
        Some(split) if !model.ablation.no_semigroup && weights.semigroup > 0.0 => {
            semigroup_penalty_graph(g, model, belief.env, r, drivers, split)?
        }
        _ => zero(g),
    };

    let innovation = match r.forcing {
        Some(f) => {
            // residual is gradient-stopped: a constant snapshot of its value
            let resid = match frozen_residual {
                Some(m) => m.clone(),
                None => g.tape.value(last.z_input).clone(),
            };
            let inv_norm: Vec<f64> = (0..resid.rows)
                .map(|i| 1.0 / (resid.row(i).iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt())
                .collect();
            let rc = g.tape.constant(resid);
            let dot = g.tape.mul(f, rc);
            let dot = g.tape.sum_cols(dot);
            let inv = g.tape.constant(Mat::col_vec(inv_norm));
            let dot = g.tape.mul(dot, inv);
            let f2 = g.tape.square(f);
            let f2 = g.tape.sum_cols(f2);
            let f2 = g.tape.add_scalar(f2, 1e-12);
            let fnorm = g.tape.unary(f2, Unary::Sqrt);
            let cos = g.tape.div(dot, fnorm);
            let neg = g.tape.scale(cos, -1.0);
            let hinge = g.tape.unary(neg, Unary::Relu);
            g.tape.mean_all(hinge)
        }
        None => zero(g),
    };

    // regime regularisers on the final pass
    let p = last.p;
    let k = model.experts();
    let tv = if r.steps > 1 {
        let cur: Vec<usize> = (0..r.batch).flat_map(|b| (1..r.steps).map(move |t| b * r.steps + t)).collect();
        let prev: Vec<usize> = cur.iter().map(|&i| i - 1).collect();
        let a = g.tape.gather_rows(p, cur);
        let b = g.tape.gather_rows(p, prev);
        let d = g.tape.sub(a, b);
        let d = g.tape.unary(d, Unary::Abs);
        let s = g.tape.sum_all(d);
        g.tape.scale(s, 1.0 / (r.batch * (r.steps - 1)) as f64)
    } else {
        zero(g)
    };
    let usage = g.tape.sum_rows(p);
    let usage = g.tape.scale(usage, 1.0 / rows as f64);
    let log_usage = log_eps(g, usage);
    let ul = g.tape.mul(usage, log_usage);
    let kl = g.tape.sum_all(ul);
    let kl_usage = g.tape.add_scalar(kl, (k as f64).ln());
    // stick-breaking Beta(1, α) prior on the usage sticks; the log-likelihood
    // of the K-1 breaks telescopes to (α-1)·log(usage of the last regime)
    let stick_breaking = if k > 1 {
        let lastu = g.tape.slice_cols(log_usage, k - 1, 1);
        let s = g.tape.sum_all(lastu);
        g.tape.scale(s, -(weights.stick_alpha - 1.0))
    } else {
        zero(g)
    };
    let log_p = log_eps(g, p);
    let plogp = g.tape.mul(p, log_p);
    let s = g.tape.sum_all(plogp);
    let entropy = g.tape.scale(s, 1.0 / rows as f64);

    let action_aux = if drivers.controls.cols > 0 {
        let uhat = g.affine(last.z, &model.layout.aux);
        let u = g.tape.constant(drivers.controls.clone());
        let d = g.tape.sub(uhat, u);
        let d = g.tape.square(d);
        g.tape.mean_all(d)
    } else {
        zero(g)
    };

    let smoothness = if r.steps >= 3 {
        let mid: Vec<usize> = (0..r.batch).flat_map(|b| (1..r.steps - 1).map(move |t| b * r.steps + t)).collect();
        let next: Vec<usize> = mid.iter().map(|&i| i + 1).collect();
        let prev: Vec<usize> = mid.iter().map(|&i| i - 1).collect();
        let a = g.tape.gather_rows(last.mu, next);
        let b = g.tape.gather_rows(last.mu, mid);
        let c = g.tape.gather_rows(last.mu, prev);
        let b2 = g.tape.scale(b, -2.0);
        let s = g.tape.add(a, b2);
        let s = g.tape.add(s, c);
        let s = g.tape.square(s);
        g.tape.mean_all(s)
    } else {
        zero(g)
    };

    let terms = vec![
        ("nll", weights.nll, nll),
        ("hurdle_bce", weights.hurdle_bce, bce),
        ("semigroup", weights.semigroup, semigroup),
        ("innovation", weights.innovation, innovation),
        ("tv", weights.tv, tv),
        ("kl_usage", weights.kl_usage, kl_usage),
        ("stick_breaking", weights.stick_breaking, stick_breaking),
        ("entropy", weights.entropy, entropy),
        ("action_aux", weights.action_aux, action_aux),
        ("smoothness", weights.smoothness, smoothness),
    ];
    let mut total = zero(g);
    for &(_, w, v) in &terms {
        if w != 0.0 {
            let wv = g.tape.scale(v, w);
            total = g.tape.add(total, wv);
        }
    }
    Ok(LossGraph { total, terms })
}

/// Semigroup gate: with probability `prob`, a split uniform in `[H/4, 3H/4]`.
pub fn draw_semigroup_split(rng: &mut impl Rng, horizon: usize, prob: f64) -> Option<usize> {
    let open = rng.random::<f64>() < prob;
    let lo = (horizon as f64 * 0.25).ceil().max(1.0) as usize;
    let hi = ((horizon as f64 * 0.75).floor() as usize).min(horizon.saturating_sub(1));
    if !open || lo > hi {
        return None;
    }
    Some(rng.random_range(lo..=hi))
}

/// Loss, breakdown and parameter gradients for one batch.
pub fn loss_and_gradients(
    model: &Model,
    store: &ParamStore,
    stats: &StandardizationStats,
    items: &[&WindowData],
    weights: &LossWeights,
    semigroup_split: Option<usize>,
) -> Result<(LossBreakdown, Vec<Mat>)> {
    let mut g = Graph::new(store, true);
    let lb = batch_loss(&mut g, model, stats, items, weights, semigroup_split, None)?;
    let breakdown = LossBreakdown::from_graph(&g, &lb);
    let mut grads = g.tape.backward(lb.total);
    let gr = store.collect_grads(&g.params, &mut grads)?;
    Ok((breakdown, gr))
}

fn batch_loss(
    g: &mut Graph,
    model: &Model,
    stats: &StandardizationStats,
    items: &[&WindowData],
    weights: &LossWeights,
    semigroup_split: Option<usize>,
    frozen_residual: Option<&Mat>,
) -> Result<LossGraph> {
    let ctx = ContextBatch::new(&items.iter().map(|w| &w.tokens).collect::<Vec<_>>());
    let drv = DriverBatch::new(&items.iter().map(|w| &w.drivers).collect::<Vec<_>>());
    let targets = TargetBatch::new(model, stats, items, weights, false)?;
    let (belief, r) = forward_graph(g, model, &ctx, &drv)?;
    composite_loss_graph(g, model, &belief, &r, &drv, &targets, weights, semigroup_split, frozen_residual)
}

/// Loss breakdown without gradients.
pub fn composite_loss(
    model: &Model,
    store: &ParamStore,
    stats: &StandardizationStats,
    items: &[&WindowData],
    weights: &LossWeights,
    semigroup_split: Option<usize>,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(store, false);
    let lb = batch_loss(&mut g, model, stats, items, weights, semigroup_split, None)?;
    Ok(LossBreakdown::from_graph(&g, &lb))
}

/// Mean per-entry negative log-likelihood over observed targets.
pub fn mean_nll(model: &Model, store: &ParamStore, stats: &StandardizationStats, items: &[&WindowData], batch_size: usize) -> Result<f64> {
    let weights = LossWeights::only_nll();
    let (mut total, mut count) = (0.0, 0.0);
    for chunk in items.chunks(batch_size.max(1)) {
        let mut g = Graph::new(store, false);
        let ctx = ContextBatch::new(&chunk.iter().map(|w| &w.tokens).collect::<Vec<_>>());
        let drv = DriverBatch::new(&chunk.iter().map(|w| &w.drivers).collect::<Vec<_>>());
        let targets = TargetBatch::new(model, stats, chunk, &weights, true)?;
        let (belief, r) = forward_graph(&mut g, model, &ctx, &drv)?;
        let lg = composite_loss_graph(&mut g, model, &belief, &r, &drv, &targets, &weights, None, None)?;
        total += g.tape.scalar(lg.terms[0].2) * targets.n_obs;
        count += targets.n_obs;
    }
    Ok(total / count)
}

/// One sampled coordinate of a gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Reverse-mode gradients of the composite loss against central differences
/// at `count` coordinates drawn uniformly over all parameter scalars.
/// Gradient-stopped quantities are held at their base values in the
/// difference quotients.
/// Relative error is `|a − n| / max(|a|, |n|, floor)`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &Model,
    store: &ParamStore,
    stats: &StandardizationStats,
    items: &[&WindowData],
    weights: &LossWeights,
    split: Option<usize>,
    count: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> Result<Vec<GradientProbe>> {
    let (_, grads) = loss_and_gradients(model, store, stats, items, weights, split)?;
    // the differentiated function holds the innovation residual at its base value
    let frozen = {
        let mut g = Graph::new(store, false);
        let ctx = ContextBatch::new(&items.iter().map(|w| &w.tokens).collect::<Vec<_>>());
        let drv = DriverBatch::new(&items.iter().map(|w| &w.drivers).collect::<Vec<_>>());
        let (_, r) = forward_graph(&mut g, model, &ctx, &drv)?;
        g.tape.value(r.last().z_input).clone()
    };
    let eval = |work: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(work, false);
        let lb = batch_loss(&mut g, model, stats, items, weights, split, Some(&frozen))?;
        Ok(g.tape.scalar(lb.total))
    };
    let sizes: Vec<usize> = store.values().iter().map(|m| m.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = seeded_rng(seed);
    let mut probes = Vec::with_capacity(count);
    let mut work = store.clone();
    for _ in 0..count {
        let mut flat = rng.random_range(0..total);
        let mut id = 0;
        while flat >= sizes[id] {
            flat -= sizes[id];
            id += 1;
        }
        let orig = store.get(id).data[flat];
        let h = step * orig.abs().max(1.0);
        work.get_mut(id).data[flat] = orig + h;
        let up = eval(&work)?;
        work.get_mut(id).data[flat] = orig - h;
        let down = eval(&work)?;
        work.get_mut(id).data[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[id].data[flat];
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        probes.push(GradientProbe {
            param: store.name(id).to_string(),
            index: flat,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(probes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub horizon: usize,
    pub train_fraction: f64,
    /// Tail of the training split held out for validation.
    pub val_fraction: f64,
    /// Cap on training windows (sampled deterministically); `None` uses all.
    pub max_train_windows: Option<usize>,
    pub val_windows: usize,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            epochs: 25,
            batch_size: 40,
            horizon: 200,
            train_fraction: 0.70,
            val_fraction: 0.10,
            max_train_windows: Some(1000),
            val_windows: 40,
            model: ModelConfig::desk(),
            ablation: Ablation::default(),
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.horizon == 0 {
            return Err(Error::Config("epochs, batch size and horizon must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("split fractions must lie in (0, 1)".into()));
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive, weight decay non-negative".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub mean_loss: f64,
    /// Mean unweighted value of each term over the epoch.
    pub terms: BTreeMap<String, f64>,
    pub val_nll: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Training and validation windows of a series under `config`.
pub struct TrainingSet {
    pub train: TypedSeries,
    pub stats: StandardizationStats,
    pub model_config: ModelConfig,
    pub train_windows: Vec<WindowData>,
    pub val_windows: Vec<WindowData>,
}

impl TrainingSet {
    pub fn new(series: &TypedSeries, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let split = split_index(series.len(), config.train_fraction);
        let train = series.slice(0..split)?;
        let stats = StandardizationStats::fit(&train)?;
        let mut model_config = config.model.clone();
        model_config.dt_ref = train.median_dt();
        let (ctx, h) = (model_config.context_len, config.horizon);
        let val_start = split - (split as f64 * config.val_fraction).floor() as usize;
        let starts = eligible_starts(&train, ctx, h);
        let mut fit: Vec<usize> = starts.iter().copied().filter(|&s| s + ctx + h <= val_start).collect();
        let mut val: Vec<usize> = starts.iter().copied().filter(|&s| s + ctx >= val_start).collect();
        if fit.is_empty() {
            return Err(Error::Population {
                requested: 1,
                population: 0,
            });
        }
        let mut rng = seeded_rng(config.seed ^ 0x5eed_0f_da7a);
        if let Some(cap) = config.max_train_windows {
            if fit.len() > cap {
                fit = rand::seq::index::sample(&mut rng, fit.len(), cap).into_iter().map(|i| fit[i]).collect();
                fit.sort_unstable();
            }
        }
        if val.len() > config.val_windows {
            val = rand::seq::index::sample(&mut rng, val.len(), config.val_windows)
                .into_iter()
                .map(|i| val[i])
                .collect();
            val.sort_unstable();
        }
        let prep = |s: usize| WindowData::new(&train, &Window::new(s, ctx, h), &stats, &model_config);
        let train_windows = fit.into_iter().map(prep).collect::<Result<Vec<_>>>()?;
        let val_windows = val.into_iter().map(prep).collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet {
            train,
            stats,
            model_config,
            train_windows,
            val_windows,
        })
    }
}

/// Trains from scratch. When `checkpoint_path` is given the best checkpoint
/// so far is written after every improving epoch.
pub fn train(series: &TypedSeries, config: &TrainConfig, checkpoint_path: Option<&Path>) -> Result<TrainOutcome> {
    let set = TrainingSet::new(series, config)?;
    train_on(&set, series, config, checkpoint_path)
}

pub fn train_on(set: &TrainingSet, series: &TypedSeries, config: &TrainConfig, checkpoint_path: Option<&Path>) -> Result<TrainOutcome> {
    let (model, mut store) = Model::build(series.schema(), set.model_config.clone(), config.ablation, config.seed)?;
    let mut opt = AdamW::new(config.optimizer, &store);
    let mut rng: ChaCha8Rng = seeded_rng(config.seed);
    let mut order: Vec<usize> = (0..set.train_windows.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let val_refs: Vec<&WindowData> = set.val_windows.iter().collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut term_sums: BTreeMap<String, f64> = BTreeMap::new();
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<&WindowData> = chunk.iter().map(|&i| &set.train_windows[i]).collect();
            let split = draw_semigroup_split(&mut rng, config.horizon, config.weights.semigroup_prob);
            let (lb, grads) = loss_and_gradients(&model, &store, &set.stats, &items, &config.weights, split)?;
            if !lb.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: lb.total,
                });
            }
            for (n, v) in &lb.terms {
                *term_sums.entry(n.clone()).or_default() += v;
            }
            losses.push(lb.total);
            opt.update(&mut store, &grads);
        }
        let steps = losses.len();
        let mut rounded = store.clone();
        rounded.round_to_f32();
        let val_nll = if val_refs.is_empty() {
            f64::NAN
        } else {
            mean_nll(&model, &rounded, &set.stats, &val_refs, config.batch_size)?
        };
        let improved = match &best {
            None => true,
            Some((b, _)) => val_nll < *b || b.is_nan(),
        };
        log.push(EpochLog {
            epoch,
            steps,
            first_loss: losses[0],
            last_loss: losses[steps - 1],
            mean_loss: losses.iter().sum::<f64>() / steps as f64,
            terms: term_sums.into_iter().map(|(n, v)| (n, v / steps as f64)).collect(),
            val_nll,
            improved,
        });
        if improved {
            best = Some((val_nll, rounded));
            if let Some(path) = checkpoint_path {
                let ck = make_checkpoint(series, set, config, best.as_ref().unwrap().1.clone(), &log);
                ck.save(path)?;
            }
        }
    }
    let (_, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: make_checkpoint(series, set, config, params, &log),
        log,
    })
}

fn make_checkpoint(series: &TypedSeries, set: &TrainingSet, config: &TrainConfig, params: ParamStore, log: &[EpochLog]) -> Checkpoint {
    Checkpoint::new(
        series.schema().clone(),
        set.stats.clone(),
        set.model_config.clone(),
        config.ablation,
        params,
        serde_json::json!({
            "config": config,
            "train_windows": set.train_windows.len(),
            "val_windows": set.val_windows.len(),
            "epochs": log,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_endpoints() {
        assert_eq!(time_weight(0, 200).unwrap(), 0.2);
        assert_eq!(time_weight(200, 200).unwrap(), 2.2);
        assert!((time_weight(100, 200).unwrap() - 0.7).abs() < 1e-15);
        assert!(time_weight(201, 200).is_err());
    }

    #[test]
    fn split_range() {
        let mut rng = seeded_rng(1);
        for _ in 0..200 {
            if let Some(s) = draw_semigroup_split(&mut rng, 200, 1.0) {
                assert!((50..=150).contains(&s));
            } else {
                panic!("gate forced open");
            }
        }
        assert!(draw_semigroup_split(&mut rng, 200, 0.0).is_none());
    }
}
