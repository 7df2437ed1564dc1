//! The `ccss` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ccss_core::checkpoint::Checkpoint;
use ccss_core::evaluation::{evaluate, horizon_grid, horizon_sweep, DEFAULT_CRPS_SAMPLES};
use ccss_core::model::{Ablation, ModelConfig};
use ccss_core::plant::{generate_plant, SyntheticPlantConfig};
use ccss_core::screening::{
    build_candidate_plans, builtin_scenarios, decision_horizon, outage_study, plant_outage_conditions, what_if, Behavior,
    OutageCondition, PlanScenario,
};
use ccss_core::series::{TypedSeries, Window};
use ccss_core::simulator::Simulator;
use ccss_core::training::{train, TrainConfig};
use clap::{Args, Parser, Subcommand};

use crate::api::{self, ApiSession, RawCriteria, ScreenRequest};
use crate::config::ServiceConfig;
use crate::workflow::{self, check_window, to_json, write_output, WindowFault, EVAL_SEED};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ccss", version, about = "Open-loop simulator for controlled processes with irregular sensors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic plant record (CSV, schema sidecar, truth file).
    GenPlant(GenPlantArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Rollout metrics of a checkpoint against persistence.
    Eval(EvalArgs),
    /// Metrics at a grid of horizons from one rollout per window.
    Sweep(SweepArgs),
    /// Compare control-plan scenarios on one window.
    Whatif(WhatifArgs),
    /// Rank candidate control plans on one window.
    Screen(ScreenArgs),
    /// Metric change when context sensors are hidden.
    Outage(OutageArgs),
    /// Longest horizon at which the model beats persistence.
    Horizon(HorizonArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenPlantArgs {
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// File stem of the outputs.
    #[arg(long, default_value = "plant")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Historian CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Schema sidecar; defaults to `<data>.schema.json`.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    FullScale,
    Desk,
    Miniature,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// none, no-forcing, no-semigroup or k1.
    #[arg(long, default_value = "none", value_parser = parse_ablation)]
    pub ablate: Ablation,
    #[arg(long, default_value_t = 200)]
    pub horizon: usize,
    #[arg(long, default_value_t = 25)]
    pub epochs: usize,
    #[arg(long, default_value_t = 40)]
    pub batch_size: usize,
    /// Cap on training windows; 0 uses all.
    #[arg(long, default_value_t = 1000)]
    pub max_windows: usize,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Override the preset's context length.
    #[arg(long)]
    pub context: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Rollout horizon; defaults to the training horizon.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub windows: usize,
    #[arg(long, default_value_t = EVAL_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_CRPS_SAMPLES)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1000)]
    pub max_horizon: usize,
    #[arg(long, default_value_t = 50)]
    pub step: usize,
    #[arg(long, default_value_t = 50)]
    pub windows: usize,
    #[arg(long, default_value_t = EVAL_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_CRPS_SAMPLES)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct WindowChoice {
    /// Window start index in the record.
    #[arg(long, conflicts_with = "behavior")]
    pub window: Option<usize>,
    /// Pick the top test window for a behavior instead.
    #[arg(long, value_parser = parse_behavior)]
    pub behavior: Option<Behavior>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Args)]
pub struct WhatifArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub choice: WindowChoice,
    /// JSON list of plans; defaults to the built-in setpoint and valve shifts.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    /// Delta horizons (1-based steps).
    #[arg(long, value_delimiter = ',', default_value = "10,50,100,200")]
    pub horizons: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub choice: WindowChoice,
    /// JSON list of plans; defaults to the eight built-in candidates.
    #[arg(long)]
    pub plans: Option<PathBuf>,
    /// Four comma-separated criterion weights.
    #[arg(long, value_parser = parse_weights)]
    pub weights: Option<[f64; 4]>,
    /// JSON list of `{name, raw}` criteria: rank without rollouts.
    #[arg(long)]
    pub raw: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutageArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub windows: usize,
    #[arg(long, default_value_t = EVAL_SEED)]
    pub seed: u64,
    /// `var+var@steps`, repeatable; defaults to the three plant conditions.
    #[arg(long = "condition", value_parser = parse_condition)]
    pub conditions: Vec<OutageCondition>,
}

#[derive(Debug, Args)]
pub struct HorizonArgs {
    #[command(flatten)]
    pub sweep: SweepArgs,
    /// Model RMSE must stay below `threshold × persistence RMSE`.
    #[arg(long, default_value_t = 1.0)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).map_err(|e| e.to_string())
}

fn parse_behavior(s: &str) -> Result<Behavior, String> {
    Behavior::parse(s).map_err(|e| e.to_string())
}

pub fn parse_weights(s: &str) -> Result<[f64; 4], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("`{p}` is not a number")))
        .collect::<Result<_, _>>()?;
    let w: [f64; 4] = parts.try_into().map_err(|v: Vec<f64>| format!("expected 4 weights, got {}", v.len()))?;
    if w.iter().any(|x| !(*x >= 0.0)) {
        return Err("weights must be non-negative".into());
    }
    Ok(w)
}

pub fn parse_condition(s: &str) -> Result<OutageCondition, String> {
    let (vars, steps) = s.split_once('@').ok_or_else(|| format!("`{s}`: expected var+var@steps"))?;
    let steps: usize = steps.parse().map_err(|_| format!("`{steps}` is not a step count"))?;
    let vars: Vec<&str> = vars.split('+').filter(|v| !v.is_empty()).collect();
    if vars.is_empty() {
        return Err(format!("`{s}` names no variable"));
    }
    Ok(OutageCondition::new(&vars, steps))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ccss_core::Error),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

type CliResult = Result<(), CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> CliResult {
    match cmd {
        Command::GenPlant(a) => gen_plant(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Whatif(a) => whatif_cmd(a),
        Command::Screen(a) => screen_cmd(a),
        Command::Outage(a) => outage_cmd(a),
        Command::Horizon(a) => horizon_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn gen_plant(a: GenPlantArgs) -> CliResult {
    let cfg = SyntheticPlantConfig { n_steps: a.steps, seed: a.seed, ..Default::default() };
    let (series, truth) = generate_plant(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(ccss_core::Error::from)?;
    let csv = a.out.join(format!("{}.csv", a.name));
    ccss_core::io::write_csv(&series, &csv)?;
    ccss_core::io::write_schema(series.schema(), ccss_core::io::sidecar_path(&csv))?;
    truth.to_container()?.save(a.out.join(format!("{}.truth", a.name)))?;
    println!("wrote {} ({} steps, {:.1}% missing)", csv.display(), series.len(), 100.0 * series.missing_fraction());
    Ok(())
}

fn load(data: &DataArgs) -> Result<TypedSeries, CliError> {
    Ok(workflow::load_dataset(&data.data, data.schema.as_deref())?)
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let series = load(&a.data)?;
    let mut model = match a.preset {
        Preset::FullScale => ModelConfig::full_scale(),
        Preset::Desk => ModelConfig::desk(),
        Preset::Miniature => ModelConfig::miniature(),
    };
    if let Some(c) = a.context {
        model.context_len = c;
    }
    let config = TrainConfig {
        seed: a.seed,
        epochs: a.epochs,
        batch_size: a.batch_size,
        horizon: a.horizon,
        max_train_windows: (a.max_windows > 0).then_some(a.max_windows),
        model,
        ablation: a.ablate,
        ..Default::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(ccss_core::Error::from)?;
    }
    let out = train(&series, &config, Some(&a.out))?;
    out.checkpoint.save(&a.out)?;
    std::fs::write(a.out.with_extension("log.json"), to_json(&out.log)?).map_err(ccss_core::Error::from)?;
    for e in &out.log {
        println!("epoch {:>3}  loss {:.4}  val_nll {:.4}{}", e.epoch, e.mean_loss, e.val_nll, if e.improved { "  *" } else { "" });
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

struct Loaded {
    sim: Simulator,
    series: TypedSeries,
}

fn open(m: &ModelArgs) -> Result<Loaded, CliError> {
    let sim = Simulator::new(Checkpoint::load(&m.checkpoint)?)?;
    let series = load(&m.data)?;
    sim.check_series(&series)?;
    Ok(Loaded { sim, series })
}

/// Training horizon recorded in the checkpoint, else 200.
pub fn trained_horizon(ck: &Checkpoint) -> usize {
    ck.metadata["config"]["horizon"].as_u64().map_or(200, |h| h as usize)
}

fn eval_items(l: &Loaded, count: usize, seed: u64, horizon: usize) -> Result<Vec<ccss_core::dataset::WindowData>, CliError> {
    let windows = workflow::eval_windows(&l.series, count, seed, l.sim.checkpoint.config.context_len, horizon)?;
    Ok(workflow::prepare_all(&l.sim, &l.series, &windows)?)
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let l = open(&a.model)?;
    let h = a.horizon.unwrap_or_else(|| trained_horizon(&l.sim.checkpoint));
    let items = eval_items(&l, a.windows, a.seed, h)?;
    let refs: Vec<_> = items.iter().collect();
    let rep = evaluate(&l.sim, &refs, a.samples, a.seed)?;
    write_output(&a.model.out, "eval.json", &to_json(&rep)?)?;
    write_output(&a.model.out, "eval.csv", &rep.to_csv()?)?;
    let (m, p) = (rep.model.at(h), rep.persistence.at(h));
    if let (Some(m), Some(p)) = (m, p) {
        println!("H={h} windows={}  model rmse {:.4} crps {:.4}  persistence rmse {:.4} crps {:.4}", refs.len(), m.aggregate.rmse, m.aggregate.crps, p.aggregate.rmse, p.aggregate.crps);
    }
    Ok(())
}

fn run_sweep(a: &SweepArgs) -> Result<(Loaded, ccss_core::evaluation::SweepReport), CliError> {
    if a.step == 0 || a.max_horizon == 0 {
        return Err(CliError::Usage("--step and --max-horizon must be positive".into()));
    }
    let l = open(&a.model)?;
    let items = eval_items(&l, a.windows, a.seed, a.max_horizon)?;
    let refs: Vec<_> = items.iter().collect();
    let rep = horizon_sweep(&l.sim, &refs, &horizon_grid(a.max_horizon, a.step), a.samples, a.seed)?;
    Ok((l, rep))
}

fn sweep_cmd(a: SweepArgs) -> CliResult {
    let (_, rep) = run_sweep(&a)?;
    write_output(&a.model.out, "sweep.json", &to_json(&rep)?)?;
    write_output(&a.model.out, "sweep.csv", &rep.to_csv()?)?;
    for (m, p) in rep.model.horizons.iter().zip(&rep.persistence.horizons) {
        println!("H={:<5} model rmse {:.4}  persistence rmse {:.4}", m.horizon, m.aggregate.rmse, p.aggregate.rmse);
    }
    Ok(())
}

fn horizon_cmd(a: HorizonArgs) -> CliResult {
    let (l, sweep) = run_sweep(&a.sweep)?;
    let rep = decision_horizon(sweep, l.series.median_dt(), a.threshold)?;
    write_output(&a.sweep.model.out, "horizon.json", &to_json(&rep)?)?;
    write_output(&a.sweep.model.out, "horizon.csv", &rep.to_csv()?)?;
    for v in &rep.per_variable {
        println!("{:<12} {:>5} steps  {:.1} h", v.variable, v.steps, v.hours);
    }
    Ok(())
}

fn resolve_window(l: &Loaded, c: &WindowChoice, default_horizon: usize) -> Result<Window, CliError> {
    let ctx = l.sim.checkpoint.config.context_len;
    let h = c.horizon.unwrap_or(default_horizon);
    let w = match (c.window, c.behavior) {
        (Some(s), _) => Window::new(s, ctx, h),
        (None, Some(b)) => workflow::pick_window(&l.series, b, &ccss_core::screening::BehaviorVariables::plant(), ctx, h)?,
        (None, None) => return Err(CliError::Usage("give --window or --behavior".into())),
    };
    match check_window(&l.series, &w) {
        Ok(()) => Ok(w),
        Err(WindowFault::Unknown) => Err(CliError::Runtime(format!("window {} with horizon {h} runs past the record", w.start))),
        Err(WindowFault::Ineligible) => Err(CliError::Runtime(format!("window {} has missing state values in its rollout", w.start))),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(ccss_core::Error::from)?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn whatif_cmd(a: WhatifArgs) -> CliResult {
    let l = open(&a.model)?;
    let w = resolve_window(&l, &a.choice, trained_horizon(&l.sim.checkpoint))?;
    let data = l.sim.prepare(&l.series, &w)?;
    let observed = PlanScenario::observed(l.series.schema(), &data.raw_drivers);
    let scenarios = match &a.scenarios {
        Some(p) => read_json(p)?,
        None => builtin_scenarios(&observed, &Default::default())?,
    };
    let horizons: Vec<usize> = a.horizons.iter().copied().filter(|&x| x <= w.horizon).collect();
    let rep = what_if(&l.sim, &data, &scenarios, &horizons)?;
    write_output(&a.model.out, "whatif.json", &to_json(&rep)?)?;
    write_output(&a.model.out, "whatif_deltas.csv", &rep.delta_csv()?)?;
    print!("window {}\n{}", w.start, rep.delta_csv()?);
    Ok(())
}

fn screen_cmd(a: ScreenArgs) -> CliResult {
    let req_raw: Option<Vec<RawCriteria>> = a.raw.as_deref().map(read_json).transpose()?;
    let resp = if let Some(raw) = req_raw {
        // pure re-rank: no model involved
        let names: Vec<String> = raw.iter().map(|r| r.name.clone()).collect();
        let rows: Vec<[f64; 4]> = raw.iter().map(|r| r.raw).collect();
        let weights = a.weights.unwrap_or(ccss_core::screening::ScreeningCriteria::default().weights);
        api::ScreenResponse {
            schema_version: api::API_SCHEMA_VERSION,
            window: None,
            report: ccss_core::screening::screen(&names, &rows, weights)?,
            rollouts: None,
        }
    } else {
        let l = open(&a.model)?;
        let w = resolve_window(&l, &a.choice, trained_horizon(&l.sim.checkpoint))?;
        let data = l.sim.prepare(&l.series, &w)?;
        let plans = match &a.plans {
            Some(p) => read_json(p)?,
            None => build_candidate_plans(&PlanScenario::observed(l.series.schema(), &data.raw_drivers), &Default::default())?,
        };
        let session = ApiSession::new(l.sim, l.series, ServiceConfig { horizon: w.horizon, ..Default::default() })?;
        let req = ScreenRequest { window: Some(w.start), horizon: Some(w.horizon), plans: Some(plans), weights: a.weights, ..Default::default() };
        api::run_screen(&session, &req).map_err(|e| CliError::Runtime(e.message))?
    };
    write_output(&a.model.out, "screen.json", &to_json(&resp)?)?;
    write_output(&a.model.out, "screen.csv", &resp.report.to_csv()?)?;
    for p in resp.report.ranked() {
        println!("{:>2}  {:<20} {:.3}{}", p.rank, p.name, p.composite, if p.pareto { "  pareto" } else { "" });
    }
    Ok(())
}

fn outage_cmd(a: OutageArgs) -> CliResult {
    let l = open(&a.model)?;
    let h = a.horizon.unwrap_or_else(|| trained_horizon(&l.sim.checkpoint));
    let items = eval_items(&l, a.windows, a.seed, h)?;
    let refs: Vec<_> = items.iter().collect();
    let conditions = if a.conditions.is_empty() { plant_outage_conditions() } else { a.conditions.clone() };
    let rep = outage_study(&l.sim, &l.series, &refs, &conditions)?;
    write_output(&a.model.out, "outage.json", &to_json(&rep)?)?;
    write_output(&a.model.out, "outage.csv", &rep.to_csv()?)?;
    print!("{}", rep.to_csv()?);
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> CliResult {
    let mut config = match &a.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok())?;
    if let Some(p) = a.port {
        config.port = p;
    }
    if let Some(d) = a.data_root {
        config.data_root = d;
    }
    config.validate()?;
    let addr = format!("{}:{}", config.bind, config.port);
    let session = Arc::new(ApiSession::open(config)?);
    let rt = tokio::runtime::Runtime::new().map_err(ccss_core::Error::from)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(ccss_core::Error::from)?;
        eprintln!("listening on http://{addr} ({} windows)", session.catalog().len());
        axum::serve(listener, api::router(session)).await.map_err(ccss_core::Error::from)?;
        Ok(())
    })
}
