//! Model configuration, schema roles, and the parameter layout shared by the
//! encoder, dynamics and emission heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{seeded_rng, Init, ParamStore};
use crate::series::{Schema, VariableKind, CONTEXT_LEN};
use crate::tape::{Tape, Var};

/// Number of temporal features per step: Δt_eff, time-of-day sin/cos, day-of-week sin/cos.
pub const TEMPORAL_FEATURES: usize = 5;
/// Per continuous variable: value, belief, mask, log-age, rate of change.
pub const VAR_FEATURES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_len: usize,
    pub env_dim: usize,
    pub z_dim: usize,
    pub s_dim: usize,
    pub c_dim: usize,
    pub su_dim: usize,
    /// Width of the scan state driving the zero-probability head.
    pub q_dim: usize,
    pub channels: usize,
    pub rollout_channels: usize,
    pub expert_width: usize,
    pub experts: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub context_dilations: Vec<usize>,
    pub rollout_dilations: Vec<usize>,
    /// Minutes; belief and categorical embeddings decay as `exp(-age/τ)`.
    pub belief_tau: f64,
    pub clip: f64,
    pub rho_init: f64,
    /// Reference step (minutes) for Δt_eff; set from the training split.
    pub dt_ref: f64,
    pub dt_eff_min: f64,
    pub dt_eff_max: f64,
    /// Gaussian emission head instead of Student-t.
    pub gaussian: bool,
}

impl ModelConfig {
    /// Full-scale typed-state dimensions; heavy for a single CPU.
    pub fn full_scale() -> Self {
        ModelConfig {
            context_len: CONTEXT_LEN,
            env_dim: 128,
            z_dim: 256,
            s_dim: 16,
            c_dim: 64,
            su_dim: 16,
            q_dim: 16,
            channels: 64,
            rollout_channels: 32,
            expert_width: 128,
            experts: 3,
            embed_dim: 32,
            kernel: 3,
            context_dilations: vec![1, 2, 4, 8],
            rollout_dilations: vec![1, 2],
            belief_tau: 60.0,
            clip: 25.0,
            rho_init: 0.95,
            dt_ref: 1.0,
            dt_eff_min: 0.05,
            dt_eff_max: 10.0,
            gaussian: false,
        }
    }

    /// Small preset that trains in about a minute on one core.
    pub fn desk() -> Self {
        ModelConfig {
            env_dim: 32,
            z_dim: 32,
            s_dim: 8,
            c_dim: 16,
            su_dim: 8,
            q_dim: 4,
            channels: 16,
            rollout_channels: 16,
            expert_width: 32,
            ..Self::full_scale()
        }
    }

    /// Gradient-check scale.
    pub fn miniature() -> Self {
        ModelConfig {
            env_dim: 8,
            z_dim: 8,
            s_dim: 4,
            c_dim: 4,
            su_dim: 4,
            q_dim: 3,
            channels: 4,
            rollout_channels: 4,
            expert_width: 6,
            embed_dim: 4,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.context_len,
            self.env_dim,
            self.z_dim,
            self.s_dim,
            self.c_dim,
            self.su_dim,
            self.q_dim,
            self.channels,
            self.rollout_channels,
            self.expert_width,
            self.experts,
            self.embed_dim,
            self.kernel,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(self.rho_init > 0.0 && self.rho_init < 1.0) {
            return Err(Error::Config(format!("rho_init must lie in (0, 1), got {}", self.rho_init)));
        }
        if !(self.dt_ref > 0.0 && self.belief_tau > 0.0 && self.clip > 0.0) {
            return Err(Error::Config("dt_ref, belief_tau and clip must be positive".into()));
        }
        if !(self.dt_eff_min > 0.0 && self.dt_eff_max >= self.dt_eff_min) {
            return Err(Error::Config("invalid Δt_eff clipping bounds".into()));
        }
        Ok(())
    }

    pub fn dt_eff(&self, dt_minutes: f64) -> f64 {
        (dt_minutes / self.dt_ref).clamp(self.dt_eff_min, self.dt_eff_max)
    }
}

/// Architectural switches used by ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_forcing: bool,
    pub no_semigroup: bool,
    pub k1: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "none" | "full" => {}
            "no-forcing" => a.no_forcing = true,
            "no-semigroup" => a.no_semigroup = true,
            "k1" => a.k1 = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected no-forcing, no-semigroup or k1)"
                )))
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> &'static str {
        match (self.no_forcing, self.no_semigroup, self.k1) {
            (false, false, false) => "full",
            (true, false, false) => "no-forcing",
            (false, true, false) => "no-semigroup",
            (false, false, true) => "k1",
            _ => "combined",
        }
    }
}

/// Schema columns grouped by role.
#[derive(Debug, Clone, PartialEq)]
pub struct Roles {
    pub state: Vec<usize>,
    pub control: Vec<usize>,
    pub exogenous: Vec<usize>,
    pub categorical: Vec<usize>,
    /// State, control and exogenous columns in schema order.
    pub continuous: Vec<usize>,
    /// Positions within `state` of zero-inflated variables.
    pub hurdle: Vec<usize>,
    pub cardinality: Vec<usize>,
}

impl Roles {
    pub fn from_schema(schema: &Schema) -> Result<Self> {
        schema.validate()?;
        let state = schema.indices(VariableKind::State);
        if state.is_empty() {
            return Err(Error::Schema("at least one state variable is required".into()));
        }
        let categorical = schema.indices(VariableKind::Categorical);
        let continuous = (0..schema.len())
            .filter(|&j| schema.variables[j].kind != VariableKind::Categorical)
            .collect();
        Ok(Roles {
            hurdle: state
                .iter()
                .enumerate()
                .filter(|(_, &j)| schema.variables[j].zero_inflated)
                .map(|(k, _)| k)
                .collect(),
            cardinality: categorical
                .iter()
                .map(|&j| schema.variables[j].cardinality.unwrap_or(1))
                .collect(),
            control: schema.indices(VariableKind::Control),
            exogenous: schema.indices(VariableKind::Exogenous),
            state,
            categorical,
            continuous,
        })
    }

    pub fn n_state(&self) -> usize {
        self.state.len()
    }

    pub fn n_drivers(&self) -> usize {
        self.control.len() + self.exogenous.len()
    }

    /// Numeric width of one context token row.
    pub fn context_numeric_width(&self) -> usize {
        VAR_FEATURES * self.continuous.len() + TEMPORAL_FEATURES + 2 * self.categorical.len()
    }
}

#[derive(Debug, Clone)]
pub struct TcnBlockIds {
    pub taps: usize,
    pub taps_b: usize,
    pub pw_w: usize,
    pub pw_b: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
pub struct TcnIds {
    pub in_w: usize,
    pub in_b: usize,
    pub blocks: Vec<TcnBlockIds>,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub w: usize,
    pub b: usize,
}

/// Indices of every parameter in the store.
#[derive(Debug, Clone)]
pub struct Layout {
    pub embeds: Vec<usize>,
    pub ctx: TcnIds,
    pub pool_q: usize,
    pub env: Head,
    pub z0: Head,
    pub s0: Head,
    pub c0: Head,
    pub su0: Head,
    pub q0: Head,
    pub p0: Head,
    pub dyn_tcn: TcnIds,
    pub act_tcn: TcnIds,
    pub force_tcn: TcnIds,
    pub tok_in: Vec<usize>,
    pub tok_bias: Vec<usize>,
    pub tok_ctx: usize,
    pub gain: Head,
    pub act_map: Head,
    pub exo_map: Head,
    pub gate: Head,
    pub rho_logit: usize,
    pub expert_in: Head,
    pub expert_out: Vec<Head>,
    pub lam_z: usize,
    pub lam_s: usize,
    pub lam_c: usize,
    pub lam_su: usize,
    pub lam_q: usize,
    pub s_in: Head,
    pub c_in: Head,
    pub su_in: Head,
    pub q_in: Head,
    pub z_from_s: usize,
    pub z_from_c: usize,
    pub mu: Head,
    pub mu_su: usize,
    pub log_sigma: Head,
    pub nu_raw: usize,
    pub pi: Head,
    pub aux: Head,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub roles: Roles,
    pub ablation: Ablation,
    pub layout: Layout,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: rand_chacha::ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> usize {
        self.store.add(name, rows, cols, init, &mut self.rng)
    }

    fn head(&mut self, name: &str, input: usize, output: usize, gain: f64) -> Head {
        Head {
            w: self.add(&format!("{name}.w"), input, output, Init::Glorot(gain)),
            b: self.add(&format!("{name}.b"), 1, output, Init::Zeros),
        }
    }

    fn tcn(&mut self, name: &str, input: usize, channels: usize, kernel: usize, dilations: &[usize]) -> TcnIds {
        let in_w = self.add(&format!("{name}.in.w"), input, channels, Init::Glorot(1.0));
        let in_b = self.add(&format!("{name}.in.b"), 1, channels, Init::Zeros);
        let blocks = dilations
            .iter()
            .enumerate()
            .map(|(i, &dilation)| TcnBlockIds {
                taps: self.add(&format!("{name}.b{i}.taps"), kernel, channels, Init::Glorot(1.0)),
                taps_b: self.add(&format!("{name}.b{i}.taps_b"), 1, channels, Init::Zeros),
                pw_w: self.add(&format!("{name}.b{i}.pw.w"), channels, 2 * channels, Init::Glorot(1.0)),
                pw_b: self.add(&format!("{name}.b{i}.pw.b"), 1, 2 * channels, Init::Zeros),
                dilation,
            })
            .collect();
        TcnIds { in_w, in_b, blocks }
    }
}

impl Model {
    /// Builds the layout and a freshly initialised parameter store.
    pub fn build(schema: &Schema, config: ModelConfig, ablation: Ablation, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let roles = Roles::from_schema(schema)?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: seeded_rng(seed),
        };
        let cfg = &config;
        let k = if ablation.k1 { 1 } else { cfg.experts };
        let n_state = roles.n_state();
        let n_hurdle = roles.hurdle.len().max(1);
        let n_ctl = roles.control.len();
        let n_exo = roles.exogenous.len();
        let n_cat = roles.categorical.len();
        let rc = cfg.rollout_channels;

        let embeds = roles
            .cardinality
            .iter()
            .enumerate()
            .map(|(i, &card)| b.add(&format!("embed{i}"), card + 1, cfg.embed_dim, Init::Glorot(1.0)))
            .collect();
        let ctx_in = roles.context_numeric_width() + n_cat * cfg.embed_dim;
        let ctx = b.tcn("ctx", ctx_in, cfg.channels, cfg.kernel, &cfg.context_dilations);
        let pool_q = b.add("pool.q", cfg.channels, 1, Init::Glorot(1.0));
        let head_in = cfg.channels + roles.context_numeric_width();
        let env = b.head("head.env", head_in, cfg.env_dim, 1.0);
        let z0 = b.head("head.z0", head_in, cfg.z_dim, 1.0);
        let s0 = b.head("head.s0", head_in, cfg.s_dim, 1.0);
        let c0 = b.head("head.c0", head_in, cfg.c_dim, 1.0);
        let su0 = b.head("head.su0", head_in, cfg.su_dim, 1.0);
        let q0 = b.head("head.q0", head_in, cfg.q_dim, 1.0);
        let p0 = b.head("head.p0", head_in, k, 0.1);

        let cat_width = n_cat * cfg.embed_dim;
        let dyn_tcn = b.tcn("dyn", n_exo + TEMPORAL_FEATURES + cat_width, rc, cfg.kernel, &cfg.rollout_dilations);
        let act_tcn = b.tcn("act", n_ctl, rc, cfg.kernel, &cfg.rollout_dilations);
        let force_tcn = b.tcn(
            "force",
            n_ctl + n_exo + TEMPORAL_FEATURES + cat_width,
            rc,
            cfg.kernel,
            &cfg.rollout_dilations,
        );
        let mut tok_in = Vec::new();
        let mut tok_bias = Vec::new();
        for i in 0..n_ctl + n_exo {
            tok_in.push(b.add(&format!("tok{i}.in"), 1, rc, Init::Glorot(1.0)));
            tok_bias.push(b.add(&format!("tok{i}.bias"), 1, rc, Init::Glorot(0.5)));
        }
        let tok_ctx = b.add("tok.ctx", rc, rc, Init::Glorot(1.0));
        let gain = b.head("gain", 2 * rc, 1, 0.5);
        let act_map = b.head("force.act", rc, cfg.z_dim, 0.5);
        let exo_map = b.head("force.exo", rc, cfg.z_dim, 0.5);

        let gate = b.head("gate", n_state + rc, k, 0.5);
        let rho = cfg.rho_init;
        let rho_logit = b.add("rho_logit", 1, 1, Init::Const((rho / (1.0 - rho)).ln()));
        let expert_in_w = n_state + rc + cfg.env_dim;
        let expert_in = b.head("expert.in", expert_in_w, k * cfg.expert_width, 1.0);
        let expert_out = (0..k)
            .map(|i| b.head(&format!("expert{i}.out"), cfg.expert_width, cfg.z_dim, 0.5))
            .collect();

        let lam_z = b.add("lam.z", k, cfg.z_dim, Init::LogUniform(0.005, 1.0));
        let lam_s = b.add("lam.s", 1, cfg.s_dim, Init::LogUniform(0.001, 0.02));
        let lam_c = b.add("lam.c", 1, cfg.c_dim, Init::LogUniform(0.01, 0.5));
        let lam_su = b.add("lam.su", 1, cfg.su_dim, Init::LogUniform(0.001, 0.05));
        let lam_q = b.add("lam.q", 1, cfg.q_dim, Init::LogUniform(0.05, 1.0));
        let s_in = b.head("scan.s.in", 2 * rc, cfg.s_dim, 0.5);
        let c_in = b.head("scan.c.in", n_state + rc, cfg.c_dim, 0.5);
        let su_in = b.head("scan.su.in", rc, cfg.su_dim, 0.5);
        let q_in = b.head("scan.q.in", cfg.z_dim + rc, cfg.q_dim, 0.5);
        let z_from_s = b.add("scan.z.from_s", cfg.s_dim, cfg.z_dim, Init::Glorot(0.5));
        let z_from_c = b.add("scan.z.from_c", cfg.c_dim, cfg.z_dim, Init::Glorot(0.5));

        let readout = cfg.z_dim + cfg.s_dim + cfg.c_dim;
        let mu = b.head("emit.mu", readout, n_state, 0.5);
        let mu_su = b.add("emit.mu_su", cfg.su_dim, n_state, Init::Glorot(0.5));
        let log_sigma = b.head("emit.log_sigma", readout, n_state, 0.1);
        // ν = 2 + softplus(raw) starts near 6
        let nu_raw = b.add("emit.nu_raw", 1, n_state, Init::Const(3.98));
        let pi = b.head("emit.pi", cfg.q_dim, n_hurdle, 0.5);
        let aux = b.head("aux.action", cfg.z_dim, n_ctl, 0.5);

        let layout = Layout {
            embeds,
            ctx,
            pool_q,
            env,
            z0,
            s0,
            c0,
            su0,
            q0,
            p0,
            dyn_tcn,
            act_tcn,
            force_tcn,
            tok_in,
            tok_bias,
            tok_ctx,
            gain,
            act_map,
            exo_map,
            gate,
            rho_logit,
            expert_in,
            expert_out,
            lam_z,
            lam_s,
            lam_c,
            lam_su,
            lam_q,
            s_in,
            c_in,
            su_in,
            q_in,
            z_from_s,
            z_from_c,
            mu,
            mu_su,
            log_sigma,
            nu_raw,
            pi,
            aux,
        };
        Ok((
            Model {
                config,
                roles,
                ablation,
                layout,
            },
            store,
        ))
    }

    pub fn experts(&self) -> usize {
        if self.ablation.k1 {
            1
        } else {
            self.config.experts
        }
    }
}

/// A tape with the model parameters bound to it.
pub struct Graph {
    pub tape: Tape,
    pub params: Vec<Var>,
}

impl Graph {
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, trainable);
        Graph { tape, params }
    }

    pub fn p(&self, id: usize) -> Var {
        self.params[id]
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, head: &Head) -> Var {
        let y = self.tape.matmul(x, self.params[head.w]);
        self.tape.add_row(y, self.params[head.b])
    }

    pub fn ones(&mut self, rows: usize, cols: usize) -> Var {
        self.tape.constant(crate::tensor::Mat::filled(rows, cols, 1.0))
    }
}
