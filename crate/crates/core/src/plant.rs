//! Synthetic controlled plant used as a desk-scale ground truth.
//!
//! Two latent concentrations evolve under an aeration control and a smooth
//! inflow disturbance while the plant alternates between an aerobic regime
//! (A, fast conversion) and an anoxic regime (B, slow conversion, fast
//! decay of the product):
//!
//! ```text
//! dx1/dt = L·w(t) − a·k(z)·e(u)·x1
//! dx2/dt = a·k(z)·e(u)·x1 − d(z)·x2
//! e(u)   = u1·(0.6 + 0.8·u2/100)
//! ```
//!
//! The regime `z` is recorded in the `phase` column. The biomass activity `a`
//! switches slowly between 1 and `low_activity` and is never recorded.
//!
//! The third channel is an emission drawn at each observation from a hurdle
//! law whose zero probability falls as the conversion flux `k·e·x1` rises.
//!
//! Inputs recorded at row `n` act over `(t[n-1], t[n]]`, so every interval
//! has constant controls and regime and is integrated with fixed-step RK4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Container, NamedTensor, TensorData};
use crate::series::{Schema, TypedSeries, VariableSpec, Window};

pub const REGIME_AEROBIC: u8 = 0;
pub const REGIME_ANOXIC: u8 = 1;

const LOAD: f64 = 0.04;
const K_CONVERT: [f64; 2] = [0.03, 0.003];
const K_DECAY: [f64; 2] = [0.004, 0.03];
const EMISSION_SCALE: f64 = 10.0;
const FLUX_REF: f64 = 0.04;
const OBS_NOISE: f64 = 0.02;
const BURN_IN_MIN: f64 = 2000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPlantConfig {
    pub n_steps: usize,
    pub seed: u64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub missing_state: f64,
    pub missing_control: f64,
    pub missing_exogenous: f64,
    /// Mean length (steps) of a joint state-sensor outage.
    pub outage_mean_steps: f64,
    pub regime_dwell_min: f64,
    pub control_dwell_min: f64,
    pub zero_inflation: f64,
    pub internal_step: f64,
    /// Mean dwell of the hidden activity level.
    pub activity_dwell_min: f64,
    /// Conversion multiplier in the low-activity state.
    pub low_activity: f64,
}

impl Default for SyntheticPlantConfig {
    fn default() -> Self {
        SyntheticPlantConfig {
            n_steps: 20_000,
            seed: 7,
            dt_min: 1.0,
            dt_max: 20.0,
            missing_state: 0.40,
            missing_control: 0.10,
            missing_exogenous: 0.10,
            outage_mean_steps: 300.0,
            regime_dwell_min: 150.0,
            control_dwell_min: 180.0,
            zero_inflation: 0.35,
            internal_step: 0.25,
            activity_dwell_min: 1440.0,
            low_activity: 0.3,
        }
    }
}

impl SyntheticPlantConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.missing_state,
            self.missing_control,
            self.missing_exogenous,
            self.zero_inflation,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        let positive = [
            self.dt_min,
            self.dt_max,
            self.outage_mean_steps,
            self.regime_dwell_min,
            self.control_dwell_min,
            self.internal_step,
            self.activity_dwell_min,
            self.low_activity,
        ];
        if positive.iter().any(|x| !(*x > 0.0)) || self.dt_max < self.dt_min {
            return Err(Error::Config("bounds must be positive with dt_min ≤ dt_max".into()));
        }
        if self.n_steps < 2 {
            return Err(Error::Config("n_steps must be at least 2".into()));
        }
        Ok(())
    }
}

pub fn plant_schema() -> Schema {
    Schema::new(vec![
        VariableSpec::state("nh4", "mg N/L"),
        VariableSpec::state("no3", "mg N/L"),
        VariableSpec::state("n2o", "mg N/L").zero_inflated(),
        VariableSpec::control("o2_setpoint", "mg/L"),
        VariableSpec::control("valve", "%"),
        VariableSpec::exogenous("inflow", "relative"),
        VariableSpec::categorical("phase", &["aerobic", "anoxic"]),
    ])
    .expect("plant schema is valid")
}

/// Column indices of the plant schema.
pub mod cols {
    pub const NH4: usize = 0;
    pub const NO3: usize = 1;
    pub const N2O: usize = 2;
    pub const SETPOINT: usize = 3;
    pub const VALVE: usize = 4;
    pub const INFLOW: usize = 5;
    pub const PHASE: usize = 6;
}

/// Everything needed to re-simulate the plant under an arbitrary plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantTruth {
    pub config: SyntheticPlantConfig,
    pub timestamps: Vec<f64>,
    pub regimes: Vec<u8>,
    /// Hidden conversion multiplier per row.
    pub activity: Vec<f64>,
    /// Latent `(x1, x2)` at each observation time.
    pub latent: Vec<[f64; 2]>,
    /// True (unmasked) controls per row.
    pub controls: Vec<[f64; 2]>,
    /// Noise-free emission per row (zero or positive).
    pub emission: Vec<f64>,
    pub inflow_phases: [f64; 3],
    /// Per-row uniform draw deciding the emission zero.
    pub zero_draws: Vec<f64>,
    /// Per-row standard normal draws: emission size, x1 noise, x2 noise.
    pub noise: Vec<[f64; 3]>,
    pub initial: [f64; 2],
}

pub fn inflow(t: f64, phases: &[f64; 3]) -> f64 {
    use std::f64::consts::TAU;
    1.0 + 0.3 * (TAU * t / 1440.0 + phases[0]).sin()
        + 0.15 * (TAU * t / (1440.0 * 3.7) + phases[1]).sin()
        + 0.1 * (TAU * t / 437.0 + phases[2]).sin()
}

fn aeration(u: [f64; 2]) -> f64 {
    u[0].max(0.0) * (0.6 + 0.8 * u[1].clamp(0.0, 100.0) / 100.0)
}

fn derivative(x: [f64; 2], t: f64, u: [f64; 2], regime: u8, activity: f64, phases: &[f64; 3]) -> [f64; 2] {
    let r = regime as usize;
    let flux = activity * K_CONVERT[r] * aeration(u) * x[0];
    [LOAD * inflow(t, phases) - flux, flux - K_DECAY[r] * x[1]]
}

/// RK4 over `(t0, t1]` with constant inputs and `ceil((t1-t0)/h)` equal substeps.
pub fn integrate_interval(
    x: [f64; 2],
    t0: f64,
    t1: f64,
    u: [f64; 2],
    regime: u8,
    activity: f64,
    phases: &[f64; 3],
    h_max: f64,
) -> [f64; 2] {
    let span = t1 - t0;
    let n = (span / h_max).ceil().max(1.0) as usize;
    let h = span / n as f64;
    let mut x = x;
    for i in 0..n {
        let t = t0 + i as f64 * h;
        let k1 = derivative(x, t, u, regime, activity, phases);
        let k2 = derivative(
            [x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1]],
            t + 0.5 * h,
            u,
            regime,
            activity,
            phases,
        );
        let k3 = derivative(
            [x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1]],
            t + 0.5 * h,
            u,
            regime,
            activity,
            phases,
        );
        let k4 = derivative([x[0] + h * k3[0], x[1] + h * k3[1]], t + h, u, regime, activity, phases);
        for j in 0..2 {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    x
}

fn emission_value(x1: f64, u: [f64; 2], regime: u8, activity: f64, zero_draw: f64, size_noise: f64, zi: f64) -> f64 {
    let flux = activity * K_CONVERT[regime as usize] * aeration(u) * x1.max(0.0);
    let pi = (zi * 2.0 * FLUX_REF / (flux + FLUX_REF)).clamp(0.0, 0.98);
    if zero_draw < pi {
        0.0
    } else {
        EMISSION_SCALE * flux * (0.3 * size_noise).exp()
    }
}

/// Alternating piecewise-constant schedule snapped to the observation grid.
fn piecewise<R: Rng>(
    rng: &mut R,
    timestamps: &[f64],
    mean_dwell: f64,
    mut draw: impl FnMut(&mut R, usize) -> f64,
) -> Vec<f64> {
    let exp = Exp::new(1.0 / mean_dwell).unwrap();
    let mut out = Vec::with_capacity(timestamps.len());
    let mut next_change = timestamps[0] + exp.sample(rng);
    let mut segment = 0;
    let mut level = draw(rng, segment);
    for &t in timestamps {
        while t >= next_change {
            segment += 1;
            level = draw(rng, segment);
            next_change += exp.sample(rng);
        }
        out.push(level);
    }
    out
}

pub fn generate_plant(config: &SyntheticPlantConfig) -> Result<(TypedSeries, PlantTruth)> {
    config.validate()?;
    let n = config.n_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut timestamps = Vec::with_capacity(n);
    let mut t = 0.0;
    for i in 0..n {
        if i > 0 {
            t += rng.random_range(config.dt_min..=config.dt_max);
        }
        timestamps.push(t);
    }
    let phases = [
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    ];
    let regimes: Vec<u8> = piecewise(&mut rng, &timestamps, config.regime_dwell_min, |_, seg| {
        (seg % 2) as f64
    })
    .into_iter()
    .map(|r| r as u8)
    .collect();
    let setpoint = piecewise(&mut rng, &timestamps, config.control_dwell_min, |r, _| {
        r.random_range(0.6..2.4)
    });
    let valve = piecewise(&mut rng, &timestamps, 2.5 * config.control_dwell_min, |r, _| {
        r.random_range(20.0..80.0)
    });
    let low = config.low_activity;
    let first_low: bool = rng.random();
    let activity = piecewise(&mut rng, &timestamps, config.activity_dwell_min, |_, seg| {
        if (seg % 2 == 0) == first_low {
            low
        } else {
            1.0
        }
    });
    let controls: Vec<[f64; 2]> = setpoint.iter().zip(&valve).map(|(&a, &b)| [a, b]).collect();

    let normal = Normal::new(0.0, 1.0).unwrap();
    let zero_draws: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let noise: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            ]
        })
        .collect();

    // burn-in under the first row's inputs
    let initial = integrate_interval(
        [2.0, 3.0],
        timestamps[0] - BURN_IN_MIN,
        timestamps[0],
        controls[0],
        regimes[0],
        activity[0],
        &phases,
        config.internal_step,
    );
    let mut truth = PlantTruth {
        config: config.clone(),
        timestamps,
        regimes,
        activity,
        latent: Vec::new(),
        controls,
        emission: Vec::new(),
        inflow_phases: phases,
        zero_draws,
        noise,
        initial,
    };
    let latent = truth.integrate(0, initial, &truth.controls.clone());
    truth.emission = (0..n)
        .map(|i| truth.emission_at(i, latent[i][0], truth.controls[i]))
        .collect();
    truth.latent = latent;

    let series = observe(&truth, &mut rng)?;
    Ok((series, truth))
}

fn observe(truth: &PlantTruth, rng: &mut ChaCha8Rng) -> Result<TypedSeries> {
    let cfg = &truth.config;
    let n = truth.timestamps.len();
    let schema = plant_schema();
    let v = schema.len();
    let mut values = vec![0.0; n * v];
    let mut mask = vec![true; n * v];

    // joint two-state outage process for the state sensors
    let r = cfg.missing_state;
    let mut off = r > 0.0 && rng.random::<f64>() < r;
    let p_end_off = 1.0 / cfg.outage_mean_steps;
    let p_end_on = if r >= 1.0 {
        1.0
    } else {
        (r / (cfg.outage_mean_steps * (1.0 - r))).min(1.0)
    };
    for i in 0..n {
        let row = &mut values[i * v..(i + 1) * v];
        let [x1, x2] = truth.latent[i];
        let nz = truth.noise[i];
        row[cols::NH4] = x1 * (OBS_NOISE * nz[1]).exp();
        row[cols::NO3] = x2 * (OBS_NOISE * nz[2]).exp();
        row[cols::N2O] = truth.emission[i];
        row[cols::SETPOINT] = truth.controls[i][0];
        row[cols::VALVE] = truth.controls[i][1];
        row[cols::INFLOW] = inflow(truth.timestamps[i], &truth.inflow_phases);
        row[cols::PHASE] = truth.regimes[i] as f64;

        let m = &mut mask[i * v..(i + 1) * v];
        if r >= 1.0 {
            off = true;
        } else if r <= 0.0 {
            off = false;
        } else if i > 0 {
            let flip: f64 = rng.random();
            off = if off { flip >= p_end_off } else { flip < p_end_on };
        }
        for j in [cols::NH4, cols::NO3, cols::N2O] {
            m[j] = !off;
        }
        for j in [cols::SETPOINT, cols::VALVE] {
            m[j] = rng.random::<f64>() >= cfg.missing_control;
        }
        m[cols::INFLOW] = rng.random::<f64>() >= cfg.missing_exogenous;
    }
    TypedSeries::new(truth.timestamps.clone(), values, mask, schema)
}

impl PlantTruth {
    fn emission_at(&self, row: usize, x1: f64, u: [f64; 2]) -> f64 {
        emission_value(
            x1,
            u,
            self.regimes[row],
            self.activity[row],
            self.zero_draws[row],
            self.noise[row][0],
            self.config.zero_inflation,
        )
    }

    /// Latent states at rows `first..first+plan.len()`, starting from `x`
    /// (the latent at row `first-1`, or the burn-in state when `first = 0`).
    fn integrate(&self, first: usize, x: [f64; 2], plan: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(plan.len());
        let mut x = x;
        for (k, &u) in plan.iter().enumerate() {
            let row = first + k;
            if row > 0 {
                x = integrate_interval(
                    x,
                    self.timestamps[row - 1],
                    self.timestamps[row],
                    u,
                    self.regimes[row],
                    self.activity[row],
                    &self.inflow_phases,
                    self.config.internal_step,
                );
            }
            out.push(x);
        }
        out
    }

    /// Exact plant response over the window's rollout rows under `plan`
    /// (one `[setpoint, valve]` pair per rollout row), starting from the true
    /// latent state at the end of the context. Returns `[x1, x2, x3]` per row.
    pub fn true_what_if(&self, window: &Window, plan: &[[f64; 2]]) -> Result<Vec<[f64; 3]>> {
        if plan.len() != window.horizon {
            return Err(Error::Plan(format!(
                "plan covers {} steps, horizon is {}",
                plan.len(),
                window.horizon
            )));
        }
        let first = window.rollout_range().start;
        if first == 0 || window.end() > self.timestamps.len() {
            return Err(Error::Range(format!("window {window:?} outside plant record")));
        }
        let latent = self.integrate(first, self.latent[first - 1], plan);
        Ok(latent
            .iter()
            .enumerate()
            .map(|(k, x)| [x[0], x[1], self.emission_at(first + k, x[0], plan[k])])
            .collect())
    }

    /// Recorded true controls over the window's rollout.
    pub fn observed_plan(&self, window: &Window) -> Vec<[f64; 2]> {
        self.controls[window.rollout_range()].to_vec()
    }

    pub fn recorded(&self, window: &Window) -> Vec<[f64; 3]> {
        window
            .rollout_range()
            .map(|i| [self.latent[i][0], self.latent[i][1], self.emission[i]])
            .collect()
    }

    pub fn regime_fraction(&self, window: &Window, regime: u8) -> f64 {
        let r = window.rollout_range();
        let len = r.len().max(1) as f64;
        self.regimes[r].iter().filter(|&&z| z == regime).count() as f64 / len
    }

    pub fn to_container(&self) -> Result<Container> {
        let n = self.timestamps.len();
        let f64s = |name: &str, shape: Vec<usize>, data: Vec<f64>| NamedTensor {
            name: name.into(),
            shape,
            data: TensorData::F64(data),
        };
        Ok(Container {
            metadata: serde_json::json!({
                "kind": "plant_truth",
                "config": self.config,
                "inflow_phases": self.inflow_phases,
                "initial": self.initial,
            }),
            tensors: vec![
                f64s("timestamps", vec![n], self.timestamps.clone()),
                f64s("regimes", vec![n], self.regimes.iter().map(|&r| r as f64).collect()),
                f64s("activity", vec![n], self.activity.clone()),
                f64s("latent", vec![n, 2], self.latent.iter().flatten().copied().collect()),
                f64s("controls", vec![n, 2], self.controls.iter().flatten().copied().collect()),
                f64s("emission", vec![n], self.emission.clone()),
                f64s("zero_draws", vec![n], self.zero_draws.clone()),
                f64s("noise", vec![n, 3], self.noise.iter().flatten().copied().collect()),
            ],
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("plant_truth") {
            return Err(Error::Checkpoint("container is not a plant truth file".into()));
        }
        let config: SyntheticPlantConfig = serde_json::from_value(meta["config"].clone())?;
        let inflow_phases: [f64; 3] = serde_json::from_value(meta["inflow_phases"].clone())?;
        let initial: [f64; 2] = serde_json::from_value(meta["initial"].clone())?;
        let get = |name: &str| -> Result<Vec<f64>> {
            c.get(name)
                .map(|t| t.data.to_f64())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let pairs = |v: Vec<f64>| v.chunks_exact(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
        Ok(PlantTruth {
            config,
            timestamps: get("timestamps")?,
            regimes: get("regimes")?.into_iter().map(|r| r as u8).collect(),
            activity: get("activity")?,
            latent: pairs(get("latent")?),
            controls: pairs(get("controls")?),
            emission: get("emission")?,
            inflow_phases,
            zero_draws: get("zero_draws")?,
            noise: get("noise")?
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
            initial,
        })
    }
}
