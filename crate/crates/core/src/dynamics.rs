//! Rollout dynamics: Δt-aware affine scans over typed latents, gain-weighted
//! forcing from future drivers, sticky regime routing over expert networks,
//! two Picard passes, and the evolution operator used by the semigroup term.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode_context_graph, encode_drivers_graph, BeliefState, BeliefVars, ContextBatch, DriverBatch, DriverFrame,
    DriverVars, TokenSequence,
};
use crate::error::{Error, Result};
use crate::model::{Graph, Head, Model};
use crate::params::ParamStore;
use crate::tape::{Tape, Unary, Var};
use crate::tensor::Mat;

pub use crate::scan::affine_scan;

/// Bound on `|log σ|` enforced by a scaled `tanh`.
pub const LOG_SIGMA_BOUND: f64 = 4.0;

/// Mixing of previous regime weights with the gate: `ρ·prev + (1-ρ)·gate`.
pub fn sticky_mix(prev: &[f64], gate: &[f64], rho: f64) -> Result<Vec<f64>> {
    if prev.len() != gate.len() {
        return Err(Error::Domain("regime vectors differ in length".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("stickiness must lie in [0, 1], got {rho}")));
    }
    for (name, v) in [("previous posterior", prev), ("gate output", gate)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || v.iter().any(|&x| x < -1e-12) {
            return Err(Error::Domain(format!("{name} is not a probability vector (sum {sum})")));
        }
    }
    Ok(prev.iter().zip(gate).map(|(p, g)| rho * p + (1.0 - rho) * g).collect())
}

/// Convex combination of expert outputs.
pub fn mix_experts(outputs: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if outputs.len() != weights.len() || outputs.is_empty() {
        return Err(Error::Domain("one weight per expert is required".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Domain(format!("expert weights are not a probability vector (sum {sum})")));
    }
    let dim = outputs[0].len();
    let mut out = vec![0.0; dim];
    for (o, &w) in outputs.iter().zip(weights) {
        if o.len() != dim {
            return Err(Error::Domain("expert outputs differ in width".into()));
        }
        for (acc, x) in out.iter_mut().zip(o) {
            *acc += w * x;
        }
    }
    Ok(out)
}

/// Weights of the forcing assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingParams {
    /// `2D×1` gain weights over `[tok_k, mean token]`.
    pub gain_w: Mat,
    pub gain_b: f64,
    pub act_w: Mat,
    pub act_b: Mat,
    pub exo_w: Mat,
    pub exo_b: Mat,
}

struct ForcingVars {
    gain_w: Var,
    gain_b: Var,
    act_w: Var,
    act_b: Var,
    exo_w: Var,
    exo_b: Var,
}

fn forcing_graph(tape: &mut Tape, tokens: &[Var], is_action: &[bool], w: &ForcingVars) -> Option<Var> {
    if tokens.is_empty() {
        return None;
    }
    let mut sum = tokens[0];
    for &t in &tokens[1..] {
        sum = tape.add(sum, t);
    }
    let mean = tape.scale(sum, 1.0 / tokens.len() as f64);
    let mut total: Option<Var> = None;
    for (&tok, &action) in tokens.iter().zip(is_action) {
        let gin = tape.concat_cols(&[tok, mean]);
        let logit = tape.matmul(gin, w.gain_w);
        let logit = tape.add_row(logit, w.gain_b);
        let gain = tape.sigmoid(logit);
        let (mw, mb) = if action { (w.act_w, w.act_b) } else { (w.exo_w, w.exo_b) };
        let mapped = tape.matmul(tok, mw);
        let mapped = tape.add_row(mapped, mb);
        let term = tape.mul_col(mapped, gain);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total
}

/// `F_t = Σ_actions g·f_act(tok) + Σ_exogenous g·f_exo(tok)`, rows are steps.
pub fn compute_forcing(tokens: &[Mat], is_action: &[bool], params: &ForcingParams) -> Result<Mat> {
    if tokens.len() != is_action.len() {
        return Err(Error::Domain("one kind flag per token is required".into()));
    }
    let width = params.act_w.cols;
    let Some(first) = tokens.first() else {
        return Err(Error::Domain("forcing needs the number of steps; pass at least one token".into()));
    };
    let rows = first.rows;
    let mut tape = Tape::new();
    let vars: Vec<Var> = tokens.iter().map(|t| tape.constant(t.clone())).collect();
    let w = ForcingVars {
        gain_w: tape.constant(params.gain_w.clone()),
        gain_b: tape.constant(Mat::scalar(params.gain_b)),
        act_w: tape.constant(params.act_w.clone()),
        act_b: tape.constant(params.act_b.clone()),
        exo_w: tape.constant(params.exo_w.clone()),
        exo_b: tape.constant(params.exo_b.clone()),
    };
    Ok(match forcing_graph(&mut tape, &vars, is_action, &w) {
        Some(f) => tape.value(f).clone(),
        None => Mat::zeros(rows, width),
    })
}

/// Latent state at one instant, one row per batch item.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub z: Var,
    pub s: Var,
    pub c: Var,
    pub su: Var,
    pub q: Var,
    pub p: Var,
}

impl From<&BeliefVars> for LatentVars {
    fn from(b: &BeliefVars) -> Self {
        LatentVars {
            z: b.z,
            s: b.s,
            c: b.c,
            su: b.su,
            q: b.q,
            p: b.p,
        }
    }
}

/// Per-step outputs of one Picard pass (`B·H` rows).
#[derive(Debug, Clone, Copy)]
pub struct PassVars {
    pub gate: Var,
    pub p: Var,
    pub z: Var,
    pub s: Var,
    pub c: Var,
    pub su: Var,
    pub q: Var,
    /// Input of the fast scan, `h_t - a_t h_{t-1}`.
    pub z_input: Var,
    pub mu: Var,
    pub log_sigma: Var,
    pub pi_logit: Var,
}

#[derive(Debug, Clone)]
pub struct RolloutVars {
    pub passes: Vec<PassVars>,
    pub forcing: Option<Var>,
    /// `1×S` degrees of freedom.
    pub nu: Var,
    pub batch: usize,
    pub steps: usize,
}

impl RolloutVars {
    pub fn last(&self) -> &PassVars {
        self.passes.last().expect("at least one pass")
    }
}

/// Emission heads: `(μ, log σ, π-logit)`.
pub fn emit(g: &mut Graph, model: &Model, z: Var, s: Var, c: Var, su: Var, q: Var) -> (Var, Var, Var) {
    let l = &model.layout;
    let read = g.tape.concat_cols(&[z, s, c]);
    let mu = g.affine(read, &l.mu);
    let bias = g.tape.matmul(su, g.p(l.mu_su));
    let mu = g.tape.add(mu, bias);
    let raw = g.affine(read, &l.log_sigma);
    let raw = g.tape.scale(raw, 1.0 / LOG_SIGMA_BOUND);
    let raw = g.tape.tanh(raw);
    let log_sigma = g.tape.scale(raw, LOG_SIGMA_BOUND);
    let pi_logit = g.affine(q, &l.pi);
    (mu, log_sigma, pi_logit)
}

pub fn degrees_of_freedom(g: &mut Graph, model: &Model) -> Var {
    let raw = g.p(model.layout.nu_raw);
    let sp = g.tape.softplus(raw);
    g.tape.add_scalar(sp, 2.0)
}

/// `(a, 1-a)` for per-dimension rates `exp(raw)` and a `BH×1` Δt column.
/// Inputs enter with gain `1-a`, so a constant input `u` settles at `u`
/// whatever the rate.
fn decay(g: &mut Graph, raw: usize, dt: Var) -> (Var, Var) {
    let lam = g.tape.exp(g.p(raw));
    let dl = g.tape.matmul(dt, lam);
    let dl = g.tape.scale(dl, -1.0);
    let a = g.tape.exp(dl);
    let om = g.tape.scale(a, -1.0);
    let om = g.tape.add_scalar(om, 1.0);
    (a, om)
}

fn scan_input(g: &mut Graph, parts: &[Var], head: &Head, gain: Var) -> Var {
    let x = if parts.len() == 1 { parts[0] } else { g.tape.concat_cols(parts) };
    let u = g.affine(x, head);
    g.tape.mul(u, gain)
}

struct PassInputs<'a> {
    env_rep: Var,
    init: &'a LatentVars,
    drv: &'a DriverVars,
    dt: Var,
    forcing: Option<Var>,
    steps: usize,
    rows: usize,
}

fn picard_pass(g: &mut Graph, model: &Model, x_route: Var, inp: &PassInputs) -> PassVars {
    let l = &model.layout;
    let k = model.experts();
    let (steps, rows) = (inp.steps, inp.rows);
    let (h_dyn, h_act) = (inp.drv.h_dyn, inp.drv.h_act);

    // regime posterior: sticky scan over the gate
    let gin = g.tape.concat_cols(&[x_route, h_dyn]);
    let logits = g.affine(gin, &l.gate);
    let gate = g.tape.row_softmax(logits);
    let rho = g.tape.sigmoid(g.p(l.rho_logit));
    let ones_k = g.ones(1, k);
    let rho_row = g.tape.matmul(rho, ones_k);
    let ones_n = g.ones(rows, 1);
    let a_p = g.tape.matmul(ones_n, rho_row);
    let om = g.tape.scale(a_p, -1.0);
    let om = g.tape.add_scalar(om, 1.0);
    let b_p = g.tape.mul(gate, om);
    let p = g.tape.scan(a_p, b_p, inp.init.p, steps);

    let (a_s, gain_s) = decay(g, l.lam_s, inp.dt);
    let b_s = scan_input(g, &[h_dyn, h_act], &l.s_in, gain_s);
    let s = g.tape.scan(a_s, b_s, inp.init.s, steps);

    let (a_c, gain_c) = decay(g, l.lam_c, inp.dt);
    let b_c = scan_input(g, &[x_route, h_dyn], &l.c_in, gain_c);
    let c = g.tape.scan(a_c, b_c, inp.init.c, steps);

    let (a_su, gain_su) = decay(g, l.lam_su, inp.dt);
    let b_su = scan_input(g, &[h_act], &l.su_in, gain_su);
    let su = g.tape.scan(a_su, b_su, inp.init.su, steps);

    // fast scan: regime-mixed rates and expert drift
    let lam = g.tape.exp(g.p(l.lam_z));
    let lam_mix = g.tape.matmul(p, lam);
    let dl = g.tape.mul_col(lam_mix, inp.dt);
    let dl = g.tape.scale(dl, -1.0);
    let a_z = g.tape.exp(dl);
    let om = g.tape.scale(a_z, -1.0);
    let gain_z = g.tape.add_scalar(om, 1.0);
    let ein = g.tape.concat_cols(&[x_route, h_dyn, inp.env_rep]);
    let hid = g.affine(ein, &l.expert_in);
    let hid = g.tape.tanh(hid);
    let width = model.config.expert_width;
    let mut drift: Option<Var> = None;
    for (i, head) in l.expert_out.iter().enumerate() {
        let h_i = g.tape.slice_cols(hid, i * width, width);
        let out = g.affine(h_i, head);
        let w_i = g.tape.slice_cols(p, i, 1);
        let term = g.tape.mul_col(out, w_i);
        drift = Some(match drift {
            Some(acc) => g.tape.add(acc, term),
            None => term,
        });
    }
    let mut u = drift.expect("at least one expert");
    let from_s = g.tape.matmul(s, g.p(l.z_from_s));
    u = g.tape.add(u, from_s);
    let from_c = g.tape.matmul(c, g.p(l.z_from_c));
    u = g.tape.add(u, from_c);
    if let Some(f) = inp.forcing {
        u = g.tape.add(u, f);
    }
    let z_input = g.tape.mul(u, gain_z);
    let z = g.tape.scan(a_z, z_input, inp.init.z, steps);

    let (a_q, gain_q) = decay(g, l.lam_q, inp.dt);
    let b_q = scan_input(g, &[z, h_act], &l.q_in, gain_q);
    let q = g.tape.scan(a_q, b_q, inp.init.q, steps);

    let (mu, log_sigma, pi_logit) = emit(g, model, z, s, c, su, q);
    PassVars {
        gate,
        p,
        z,
        s,
        c,
        su,
        q,
        z_input,
        mu,
        log_sigma,
        pi_logit,
    }
}

/// Two-pass rollout from `init`. `x0` (`B×S`) routes the first pass.
#[allow(clippy::too_many_arguments)]
pub fn rollout_graph(
    g: &mut Graph,
    model: &Model,
    env: Var,
    init: &LatentVars,
    x0: Var,
    drv: &DriverVars,
    dt_eff: &Mat,
    batch: usize,
    steps: usize,
) -> Result<RolloutVars> {
    let rows = batch * steps;
    let dt = g.tape.constant(dt_eff.clone());
    let env_rep = g.tape.repeat_rows(env, steps);
    let l = &model.layout;
    let forcing = if model.ablation.no_forcing || drv.tokens.is_empty() {
        None
    } else {
        let w = ForcingVars {
            gain_w: g.p(l.gain.w),
            gain_b: g.p(l.gain.b),
            act_w: g.p(l.act_map.w),
            act_b: g.p(l.act_map.b),
            exo_w: g.p(l.exo_map.w),
            exo_b: g.p(l.exo_map.b),
        };
        let kinds: Vec<bool> = (0..drv.tokens.len()).map(|i| i < drv.n_control).collect();
        forcing_graph(&mut g.tape, &drv.tokens, &kinds, &w)
    };
    let inp = PassInputs {
        env_rep,
        init,
        drv,
        dt,
        forcing,
        steps,
        rows,
    };
    let route0 = g.tape.repeat_rows(x0, steps);
    let first = picard_pass(g, model, route0, &inp);
    let second = picard_pass(g, model, first.mu, &inp);
    let z = g.tape.value(second.z);
    if let Some(bad) = z.data.iter().position(|x| !x.is_finite()) {
        let row = bad / z.cols;
        return Err(Error::numeric(
            format!("rollout step {}", row % steps),
            format!("non-finite latent in batch item {}", row / steps),
        ));
    }
    let nu = degrees_of_freedom(g, model);
    Ok(RolloutVars {
        passes: vec![first, second],
        forcing,
        nu,
        batch,
        steps,
    })
}

/// Emission mean of the initial latent, used to route the first pass.
pub fn initial_readout(g: &mut Graph, model: &Model, init: &LatentVars) -> Var {
    emit(g, model, init.z, init.s, init.c, init.su, init.q).0
}

/// Encodes contexts and rolls out over drivers in one graph.
pub fn forward_graph(g: &mut Graph, model: &Model, ctx: &ContextBatch, drivers: &DriverBatch) -> Result<(BeliefVars, RolloutVars)> {
    let belief = encode_context_graph(g, model, ctx)?;
    let drv = encode_drivers_graph(g, model, drivers)?;
    let init = LatentVars::from(&belief);
    let x0 = initial_readout(g, model, &init);
    let r = rollout_graph(g, model, belief.env, &init, x0, &drv, &drivers.dt_eff, drivers.batch, drivers.steps)?;
    Ok((belief, r))
}

fn gather(g: &mut Graph, v: Var, idx: &[usize]) -> Var {
    g.tape.gather_rows(v, idx.to_vec())
}

/// Latents after `split` steps of the final pass, one row per batch item.
pub fn latents_at(g: &mut Graph, r: &RolloutVars, split: usize) -> (LatentVars, Var) {
    let idx: Vec<usize> = (0..r.batch).map(|b| b * r.steps + split - 1).collect();
    let f = *r.last();
    let init = LatentVars {
        z: gather(g, f.z, &idx),
        s: gather(g, f.s, &idx),
        c: gather(g, f.c, &idx),
        su: gather(g, f.su, &idx),
        q: gather(g, f.q, &idx),
        p: gather(g, f.p, &idx),
    };
    let x = gather(g, f.mu, &idx);
    (init, x)
}

/// Restarts the rollout at `split` from the full run's latent and returns the
/// composed second-segment rollout.
pub fn compose_from(
    g: &mut Graph,
    model: &Model,
    env: Var,
    full: &RolloutVars,
    drivers: &DriverBatch,
    split: usize,
) -> Result<RolloutVars> {
    let (init, x0) = latents_at(g, full, split);
    let seg = drivers.slice_steps(split..drivers.steps);
    let drv = encode_drivers_graph(g, model, &seg)?;
    rollout_graph(g, model, env, &init, x0, &drv, &seg.dt_eff, seg.batch, seg.steps)
}

/// Mean squared gap between full-horizon and composed means over the second segment.
pub fn semigroup_penalty_graph(
    g: &mut Graph,
    model: &Model,
    env: Var,
    full: &RolloutVars,
    drivers: &DriverBatch,
    split: usize,
) -> Result<Var> {
    if split == 0 || split >= drivers.steps {
        return Err(Error::Range(format!(
            "split {split} must lie strictly inside the horizon {}",
            drivers.steps
        )));
    }
    let comp = compose_from(g, model, env, full, drivers, split)?;
    let idx: Vec<usize> = (0..full.batch)
        .flat_map(|b| (split..full.steps).map(move |t| b * full.steps + t))
        .collect();
    let tail = gather(g, full.last().mu, &idx);
    let diff = g.tape.sub(tail, comp.last().mu);
    let sq = g.tape.unary(diff, Unary::Square);
    Ok(g.tape.mean_all(sq))
}

/// Plain-valued rollout in standardized space for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: usize,
    /// `H×S` means and scales of the continuous part (standardized space).
    pub mu: Mat,
    pub sigma: Mat,
    /// Per state variable; `∞` for the Gaussian head.
    pub nu: Vec<f64>,
    /// `H×S` zero probabilities (0 for non-hurdle variables).
    pub pi: Mat,
    /// `H×K` regime weights of the final pass.
    pub regimes: Mat,
    /// `H×K` regime weights of the first pass.
    pub regimes_first: Mat,
    /// `H×S` means of the first pass.
    pub mu_first: Mat,
}

fn rows_of(m: &Mat, b: usize, steps: usize) -> Mat {
    Mat::from_vec(steps, m.cols, m.data[b * steps * m.cols..(b + 1) * steps * m.cols].to_vec())
}

/// Splits batched rollout variables into per-window trajectories.
pub fn trajectories(g: &Graph, model: &Model, r: &RolloutVars) -> Vec<Trajectory> {
    let f = r.last();
    let first = &r.passes[0];
    let t = &g.tape;
    let nu: Vec<f64> = if model.config.gaussian {
        vec![f64::INFINITY; model.roles.n_state()]
    } else {
        t.value(r.nu).data.clone()
    };
    let n_state = model.roles.n_state();
    (0..r.batch)
        .map(|b| {
            let mu = rows_of(t.value(f.mu), b, r.steps);
            let sigma = rows_of(t.value(f.log_sigma), b, r.steps).map(f64::exp);
            let logits = rows_of(t.value(f.pi_logit), b, r.steps);
            let mut pi = Mat::zeros(r.steps, n_state);
            for step in 0..r.steps {
                for (h, &k) in model.roles.hurdle.iter().enumerate() {
                    pi.set(step, k, crate::tape::sigmoid(logits.at(step, h)));
                }
            }
            Trajectory {
                steps: r.steps,
                mu,
                sigma,
                nu: nu.clone(),
                pi,
                regimes: rows_of(t.value(f.p), b, r.steps),
                regimes_first: rows_of(t.value(first.p), b, r.steps),
                mu_first: rows_of(t.value(first.mu), b, r.steps),
            }
        })
        .collect()
}

/// Batched inference from context tokens and drivers.
pub fn simulate(model: &Model, store: &ParamStore, contexts: &[&TokenSequence], drivers: &[&DriverFrame]) -> Result<Vec<Trajectory>> {
    if contexts.len() != drivers.len() || contexts.is_empty() {
        return Err(Error::Domain("one driver frame per context is required".into()));
    }
    let mut g = Graph::new(store, false);
    let ctx = ContextBatch::new(contexts);
    let drv = DriverBatch::new(drivers);
    let (_, r) = forward_graph(&mut g, model, &ctx, &drv)?;
    Ok(trajectories(&g, model, &r))
}

fn belief_vars(g: &mut Graph, belief: &BeliefState) -> BeliefVars {
    let mut row = |v: &Vec<f64>| g.tape.constant(Mat::row_vec(v.clone()));
    BeliefVars {
        env: row(&belief.env),
        z: row(&belief.z0),
        s: row(&belief.s0),
        c: row(&belief.c0),
        su: row(&belief.su0),
        q: row(&belief.q0),
        p: row(&belief.p0),
    }
}

/// Rollout from an explicit belief state.
pub fn rollout(model: &Model, store: &ParamStore, belief: &BeliefState, drivers: &DriverFrame) -> Result<Trajectory> {
    if drivers.steps == 0 {
        return Err(Error::Range("empty rollout horizon".into()));
    }
    let mut g = Graph::new(store, false);
    let b = belief_vars(&mut g, belief);
    let batch = DriverBatch::new(&[drivers]);
    let drv = encode_drivers_graph(&mut g, model, &batch)?;
    let init = LatentVars::from(&b);
    let x0 = initial_readout(&mut g, model, &init);
    let r = rollout_graph(&mut g, model, b.env, &init, x0, &drv, &batch.dt_eff, 1, batch.steps)?;
    Ok(trajectories(&g, model, &r).remove(0))
}

/// Terminal latent after evolving the belief over the first `t` driver steps.
pub fn evolve(model: &Model, store: &ParamStore, belief: &BeliefState, drivers: &DriverFrame, t: usize) -> Result<BeliefState> {
    if t > drivers.steps {
        return Err(Error::Range(format!("t = {t} beyond horizon {}", drivers.steps)));
    }
    if t == 0 {
        return Ok(belief.clone());
    }
    let mut g = Graph::new(store, false);
    let b = belief_vars(&mut g, belief);
    let prefix = drivers.slice(0..t);
    let batch = DriverBatch::new(&[&prefix]);
    let drv = encode_drivers_graph(&mut g, model, &batch)?;
    let init = LatentVars::from(&b);
    let x0 = initial_readout(&mut g, model, &init);
    let r = rollout_graph(&mut g, model, b.env, &init, x0, &drv, &batch.dt_eff, 1, t)?;
    let f = r.last();
    let last = |v: Var| g.tape.value(v).row(t - 1).to_vec();
    Ok(BeliefState {
        env: belief.env.clone(),
        z0: last(f.z),
        s0: last(f.s),
        c0: last(f.c),
        su0: last(f.su),
        q0: last(f.q),
        p0: last(f.p),
    })
}

/// Semigroup penalty for a single window at `split`.
pub fn semigroup_penalty(model: &Model, store: &ParamStore, belief: &BeliefState, drivers: &DriverFrame, split: usize) -> Result<f64> {
    let mut g = Graph::new(store, false);
    let b = belief_vars(&mut g, belief);
    let batch = DriverBatch::new(&[drivers]);
    let drv = encode_drivers_graph(&mut g, model, &batch)?;
    let init = LatentVars::from(&b);
    let x0 = initial_readout(&mut g, model, &init);
    let full = rollout_graph(&mut g, model, b.env, &init, x0, &drv, &batch.dt_eff, 1, batch.steps)?;
    let pen = semigroup_penalty_graph(&mut g, model, b.env, &full, &batch, split)?;
    Ok(g.tape.scalar(pen))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sticky_mix_reference_point() {
        let p = sticky_mix(&[1.0, 0.0, 0.0], &[1.0 / 3.0; 3], 0.95).unwrap();
        assert!((p[0] - 0.966_666_666_666_666_7).abs() < 1e-12);
        assert!((p[1] - 0.016_666_666_666_666_7).abs() < 1e-12);
        assert!(sticky_mix(&[0.5, 0.6], &[0.5, 0.5], 0.9).is_err());
    }

    #[test]
    fn mixing_endpoints() {
        let outs = vec![vec![1.0, 2.0], vec![-3.0, 5.0]];
        assert_eq!(mix_experts(&outs, &[1.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        let same = vec![vec![0.3, 0.4]; 3];
        assert_eq!(mix_experts(&same, &[0.2, 0.3, 0.5]).unwrap(), vec![0.3, 0.4]);
    }
}
