use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use resetlab::config::{self, ControllerFile, ElementFile};
use resetlab::elements::ResetSystem;
use resetlab::hosidf::{self, HarmonicResponse};
use resetlab::sim::{self, ErrorMetrics, Signal, SimConfig, SimTrace, TriggerSource};
use resetlab::stability::{self, CertificateJson, ClosedLoopPartition, StabilityOutcome};
use resetlab::Error;

#[derive(Parser, Debug)]
#[command(name = "resetlab", version, about = "Reset control analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Higher-order describing functions of CgLp elements, one CSV per config.
    Hosidf(HosidfArgs),
    /// Closed-loop time simulation of one controller config.
    Simulate(SimulateArgs),
    /// Steady-state error metrics over a frequency grid for several controllers.
    SweepError(SweepArgs),
    /// Quadratic stability search for one controller config.
    Stability(StabilityArgs),
    /// Frequency response of the base linear system (all resets disabled).
    Bode(BodeArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; repeat for batches.
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    #[arg(long)]
    omega_min: Option<f64>,
    #[arg(long)]
    omega_max: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
}

impl GridArgs {
    /// The log grid and its resolved bounds for the manifest.
    fn grid(&self, lo: f64, hi: f64, points: usize) -> resetlab::Result<(Vec<f64>, Value)> {
        let (lo, hi, n) = (self.omega_min.unwrap_or(lo), self.omega_max.unwrap_or(hi), self.points.unwrap_or(points));
        Ok((hosidf::log_grid(lo, hi, n)?, json!({ "omega_min": lo, "omega_max": hi, "points": n })))
    }
}

#[derive(Args, Debug)]
struct HosidfArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated harmonic orders.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    orders: Vec<u32>,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Debug)]
struct BodeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "snake_case")]
enum RefKind {
    Sin,
    Step,
    Zero,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "snake_case")]
enum TriggerArg {
    ElementInput,
    LoopError,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "ref", value_enum, default_value = "sin")]
    reference: RefKind,
    /// Reference frequency; also sets the time base for step and zero references.
    #[arg(long, default_value_t = 10.0)]
    omega: f64,
    #[arg(long, default_value_t = sim::DEFAULT_PERIODS)]
    periods: usize,
    #[arg(long)]
    dt: Option<f64>,
    /// Overrides the trigger given in the config.
    #[arg(long, value_enum)]
    trigger: Option<TriggerArg>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = sim::DEFAULT_PERIODS)]
    periods: usize,
}

#[derive(Args, Debug)]
struct StabilityArgs {
    #[command(flatten)]
    common: Common,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) | Error::DimensionMismatch(_) | Error::Json(_) | Error::Io(_) => 2,
            Error::Divergence { .. } | Error::EventStorm { .. } | Error::NonFiniteState { .. } => 4,
            Error::BaseLinearUnstable { .. } => 5,
            _ => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, message: msg.into() }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_paths: Vec<PathBuf>,
    out_dir: PathBuf,
    parameters: Value,
    tool_version: String,
    wall_clock_s: f64,
    outputs: Vec<String>,
    status: String,
}

/// Collects written files so the manifest can list them.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write<F>(&mut self, name: &str, f: F) -> Result<(), Failure>
    where
        F: FnOnce(BufWriter<File>) -> resetlab::Result<()>,
    {
        let file = File::create(self.dir.join(name)).map_err(|e| Failure::from(Error::Io(e)))?;
        f(BufWriter::new(file))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<(), Failure> {
        self.write(name, |mut w| {
            serde_json::to_writer_pretty(&mut w, v)?;
            use std::io::Write;
            writeln!(w)?;
            Ok(())
        })
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn unique_names(names: Vec<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(names.len());
    for n in names {
        let mut cand = file_stem(&n);
        let mut k = 2;
        while out.contains(&cand) {
            cand = format!("{}_{k}", file_stem(&n));
            k += 1;
        }
        out.push(cand);
    }
    out
}

fn load_elements(paths: &[PathBuf]) -> Result<Vec<(ElementFile, ResetSystem)>, Failure> {
    paths
        .iter()
        .map(|p| {
            let f = config::load_element(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let sys = f.build().map_err(|e| usage(format!("{}: {e}", p.display())))?;
            Ok((f, sys))
        })
        .collect()
}

fn load_controllers(paths: &[PathBuf]) -> Result<Vec<ControllerFile>, Failure> {
    paths
        .iter()
        .map(|p| config::load_controller(p).map_err(|e| usage(format!("{}: {e}", p.display()))))
        .collect()
}

/// Reports the first gap of a sweep as a numeric failure naming its frequency.
fn first_gap(resp: &HarmonicResponse, sys: &ResetSystem) -> Option<Failure> {
    let i = (0..resp.frequencies.len()).find(|&i| resp.values.iter().any(|row| row[i].is_none()))?;
    let w = resp.frequencies[i];
    let msg = match hosidf::describing_functions(sys, &resp.orders, w) {
        Err(e) => e.to_string(),
        Ok(_) => format!("describing function undefined at omega = {w} rad/s"),
    };
    Some(Failure { code: 3, message: msg })
}

fn cmd_hosidf(a: &HosidfArgs, out: &mut Outputs) -> Result<Value, Failure> {
    if a.orders.is_empty() {
        return Err(usage("--orders is empty"));
    }
    let (grid, grid_echo) = a.grid.grid(0.1, 1e4, 500)?;
    let elems = load_elements(&a.common.configs)?;
    let names = unique_names(elems.iter().map(|(f, _)| f.display_name()).collect());
    let mut failure = None;
    for ((f, sys), name) in elems.iter().zip(&names) {
        let resp = hosidf::hosidf_sweep_with(sys, &a.orders, &grid, Default::default(), &f.display_name())?;
        out.write(&format!("hosidf_{name}.csv"), |w| resp.write_csv(w))?;
        if failure.is_none() {
            failure = first_gap(&resp, sys);
        }
    }
    if let Some(f) = failure {
        return Err(f);
    }
    Ok(json!({ "orders": a.orders, "grid": grid_echo, "systems": names }))
}

fn base_linear_response(v: &Value, path: &Path, grid: &[f64]) -> Result<(String, HarmonicResponse), Failure> {
    let text = v.to_string();
    let wrap = |e: Error| usage(format!("{}: {e}", path.display()));
    if v.get("plant").is_some() {
        let c = config::parse_controller(&text).map_err(wrap)?;
        let (chain, plant) = c.build()?;
        let base = chain.base_linear();
        let resp = hosidf::chain_open_loop_hosidf(&base, &plant.model(), &[1], grid)?;
        Ok((c.name.clone(), HarmonicResponse { source: format!("{} base linear open loop", c.name), ..resp }))
    } else {
        let f = config::parse_element(&text).map_err(wrap)?;
        let sys = f.build().map_err(wrap)?;
        let values = vec![grid.iter().map(|&w| hosidf::linear_freq_response(sys.base(), w).ok()).collect()];
        let resp = HarmonicResponse {
            source: format!("{} base linear", f.display_name()),
            frequencies: grid.to_vec(),
            orders: vec![1],
            values,
        };
        Ok((f.display_name(), resp))
    }
}

fn cmd_bode(a: &BodeArgs, out: &mut Outputs) -> Result<Value, Failure> {
    let (grid, grid_echo) = a.grid.grid(0.1, 1e4, 500)?;
    let mut responses = Vec::new();
    for p in &a.common.configs {
        let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        responses.push(base_linear_response(&v, p, &grid)?);
    }
    let names = unique_names(responses.iter().map(|(n, _)| n.clone()).collect());
    for ((_, resp), name) in responses.iter().zip(&names) {
        out.write(&format!("bode_{name}.csv"), |w| resp.write_csv(w))?;
    }
    Ok(json!({ "grid": grid_echo, "systems": names }))
}

fn trigger_of(c: &ControllerFile, flag: Option<TriggerArg>) -> TriggerSource {
    match flag {
        Some(TriggerArg::ElementInput) => TriggerSource::ElementInput,
        Some(TriggerArg::LoopError) => TriggerSource::LoopError,
        None => c.trigger.unwrap_or_default(),
    }
}

/// Metrics over the final `window_fraction` of a trace that has no period.
fn tail_metrics(trace: &SimTrace, fraction: f64) -> ErrorMetrics {
    let t_end = trace.t.last().copied().unwrap_or(0.0);
    let start = t_end * (1.0 - fraction);
    let first = trace.t.partition_point(|&t| t < start);
    let mut tail = trace.clone();
    tail.t = trace.t[first..].to_vec();
    tail.e = trace.e[first..].to_vec();
    sim::error_metrics(&tail)
}

fn cmd_simulate(a: &SimulateArgs, out: &mut Outputs) -> Result<Value, Failure> {
    if a.common.configs.len() != 1 {
        return Err(usage("simulate takes exactly one --config"));
    }
    if !(a.omega > 0.0 && a.omega.is_finite()) || a.periods < 2 {
        return Err(usage("--omega must be positive and --periods at least 2"));
    }
    let c = &load_controllers(&a.common.configs)?[0];
    let (chain, plant) = c.build()?;
    let mut cfg = SimConfig::with_periods(a.omega, a.periods, sim::STEPS_PER_PERIOD);
    if let Some(dt) = a.dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(usage("--dt must be positive"));
        }
        cfg.dt = dt;
        cfg.event_tol = dt * 1e-6;
        cfg.holdoff = dt * sim::HOLDOFF_FRACTION;
    }
    cfg.trigger = trigger_of(c, a.trigger);
    cfg.validate()?;
    let reference = match a.reference {
        RefKind::Sin => Signal::sin(a.omega),
        RefKind::Step => Signal::Step { amplitude: 1.0 },
        RefKind::Zero => Signal::Zero,
    };
    let trace = sim::simulate_closed_loop(&chain, &plant.model(), &reference, &cfg)?;
    let metrics = match reference.period() {
        Some(period) => {
            let keep = ((cfg.window_fraction * cfg.duration / period).round() as usize).max(1);
            sim::error_metrics(&sim::extract_steady_state(&trace, period, keep)?)
        }
        None => tail_metrics(&trace, cfg.window_fraction),
    };
    out.write("trace.csv", |w| trace.write_csv(w))?;
    out.write("events.csv", |w| trace.write_events_csv(w))?;
    out.write_json("metrics.json", &metrics)?;
    Ok(json!({
        "controller": c.name,
        "ref": a.reference,
        "omega": a.omega,
        "periods": a.periods,
        "dt": cfg.dt,
        "event_tol": cfg.event_tol,
        "holdoff": cfg.holdoff,
        "window_fraction": cfg.window_fraction,
        "trigger": cfg.trigger,
        "k_p": chain.k_p,
        "omega_i": chain.omega_i,
        "tamed": chain.tamed,
    }))
}

fn cmd_sweep(a: &SweepArgs, out: &mut Outputs) -> Result<Value, Failure> {
    if a.periods < 2 {
        return Err(usage("--periods must be at least 2"));
    }
    let (grid, grid_echo) = a.grid.grid(1.0, 100.0, 50)?;
    let files = load_controllers(&a.common.configs)?;
    let mut rows = Vec::new();
    for c in &files {
        let (chain, plant) = c.build()?;
        let trigger = c.trigger.unwrap_or_default();
        let periods = a.periods;
        let pts = sim::sweep_error(&chain, &plant.model(), &grid, |w| {
            let mut cfg = SimConfig::with_periods(w, periods, sim::STEPS_PER_PERIOD);
            cfg.trigger = trigger;
            cfg
        });
        rows.push((c.name.clone(), pts));
    }
    out.write("sweep_error.csv", |w| sim::write_sweep_csv(w, &rows))?;
    Ok(json!({ "grid": grid_echo, "periods": a.periods, "controllers": files.iter().map(|c| c.name.clone()).collect::<Vec<_>>() }))
}

fn cmd_stability(a: &StabilityArgs, out: &mut Outputs) -> Result<Value, Failure> {
    if a.common.configs.len() != 1 {
        return Err(usage("stability takes exactly one --config"));
    }
    let c = &load_controllers(&a.common.configs)?[0];
    let (chain, plant) = c.build()?;
    let part = ClosedLoopPartition::from_chain(&chain, &plant.model())?;
    let outcome = stability::quadratic_stability_search(&part, Default::default())?;
    let report = match &outcome {
        StabilityOutcome::Certified(cert) => {
            json!({ "result": "certified", "controller": c.name, "certificate": CertificateJson::new(cert, &part) })
        }
        StabilityOutcome::Unknown { best_margin, reason } => json!({
            "result": "unknown",
            "controller": c.name,
            "best_margin": if best_margin.is_finite() { json!(best_margin) } else { Value::Null },
            "reason": reason,
        }),
    };
    out.write_json("stability.json", &report)?;
    println!("{}: {}", c.name, report["result"].as_str().unwrap_or(""));
    Ok(json!({ "controller": c.name }))
}

fn init_threads() {
    if let Ok(v) = std::env::var("RESETLAB_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring RESETLAB_THREADS={v}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    init_threads();
    let start = Instant::now();
    let (name, common) = match &cli.command {
        Command::Hosidf(a) => ("hosidf", &a.common),
        Command::Simulate(a) => ("simulate", &a.common),
        Command::SweepError(a) => ("sweep-error", &a.common),
        Command::Stability(a) => ("stability", &a.common),
        Command::Bode(a) => ("bode", &a.common),
    };
    let mut out = match Outputs::new(&common.out_dir) {
        Ok(o) => o,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return ExitCode::from(f.code);
        }
    };
    let result = match &cli.command {
        Command::Hosidf(a) => cmd_hosidf(a, &mut out),
        Command::Simulate(a) => cmd_simulate(a, &mut out),
        Command::SweepError(a) => cmd_sweep(a, &mut out),
        Command::Stability(a) => cmd_stability(a, &mut out),
        Command::Bode(a) => cmd_bode(a, &mut out),
    };
    let (status, code, params) = match result {
        Ok(p) => ("ok".to_string(), 0, p),
        Err(f) => {
            eprintln!("error: {}", f.message);
            (format!("error: {}", f.message), f.code, Value::Null)
        }
    };
    let manifest = RunManifest {
        command: name.into(),
        config_paths: common.configs.clone(),
        out_dir: common.out_dir.clone(),
        parameters: params,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        outputs: {
            let mut v = out.files.clone();
            v.push("manifest.json".into());
            v
        },
        status,
    };
    if let Err(f) = out.write_json("manifest.json", &manifest) {
        eprintln!("error: {}", f.message);
        return ExitCode::from(if code == 0 { f.code } else { code });
    }
    ExitCode::from(code)
}
