//! `sentinel`: run the service, drive the closed-loop simulator, and produce
//! offline evaluation and calibration reports.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sentinel_core::config::ServiceConfig;
use sentinel_core::gate::Registry;
use sentinel_core::metrics::{ece_from_observations, evaluate, CalibrationBin, EvalPair};
use sentinel_core::parser::default_rules;
use sentinel_core::pipeline::Pipeline;
use sentinel_core::replay::lora_param_count;
use sentinel_core::sim::{generate_fleet, prepare, run_cycle, LocalDriver, SimError, SimReport, SimScenario};
use sentinel_server::{HttpDriver, ServerError, ServerHandle};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "sentinel", version, about = "Plate-recognition orchestration with human-in-the-loop retraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve the JSON API. SENTINEL_BIND and SENTINEL_REGISTRY override the file.
    Serve {
        /// Service config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the closed-loop simulation and print its report.
    Simulate {
        /// Scenario file (JSON); defaults apply when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of traffic vehicles.
        #[arg(long)]
        vehicles: Option<usize>,
        /// Share of each training batch drawn from corrections.
        #[arg(long)]
        lambda: Option<f64>,
        /// Working directory for scripts, stores and the model registry;
        /// a temporary one is used when omitted.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Drive a local HTTP server instead of the in-process pipeline.
        #[arg(long)]
        http: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a JSON-lines file of evaluation pairs.
    Eval {
        pairs: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Plate format rules (JSON); the generic default when omitted.
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ECE and reliability bins of a prediction log. Each line is either
    /// `{"confidence": c, "correct": bool}` or an evaluation pair.
    Calibrate {
        log: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trainable parameter count of a LoRA adapter.
    LoraParams {
        #[arg(long)]
        layers: u64,
        #[arg(long)]
        modules: u64,
        #[arg(long)]
        dim: u64,
        #[arg(long)]
        rank: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Swap the registry's current and previous versions.
    Rollback {
        /// Registry directory; taken from --config when omitted.
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidScenario(_) | SimError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ServerError> for CliError {
    fn from(e: ServerError) -> Self {
        match e {
            ServerError::Bind { .. } | ServerError::Pipeline(sentinel_core::pipeline::PipelineError::Config(_)) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, format!("{text}\n"))
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| CliError::Data(e.to_string()))
        }
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    emit(&serde_json::to_string_pretty(value).expect("reports serialize"), out)
}

fn load_config(path: Option<&Path>) -> Result<ServiceConfig, CliError> {
    let mut config = match path {
        Some(p) => ServiceConfig::load(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => ServiceConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok());
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// Parses a JSON-lines file, skipping blank lines.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn simulate(
    mut s: SimScenario,
    seed: Option<u64>,
    vehicles: Option<usize>,
    lambda: Option<f64>,
    dir: Option<&Path>,
    http: bool,
) -> Result<SimReport, CliError> {
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(n) = vehicles {
        s.n_vehicles = n;
    }
    if let Some(l) = lambda {
        s.mix.lambda = l;
    }
    let scratch;
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => {
            scratch = tempfile::tempdir().map_err(|e| CliError::Data(e.to_string()))?;
            scratch.path().to_path_buf()
        }
    };
    let fleet = generate_fleet(&s)?;
    let config = prepare(&s, &fleet, &dir)?;
    let pipeline = Pipeline::open(config).map_err(SimError::from)?;
    if http {
        let server = ServerHandle::start(pipeline, "127.0.0.1:0")?;
        let mut driver = HttpDriver::new(&server.url())?;
        let report = run_cycle(&s, &fleet, &mut driver)?;
        server.shutdown()?;
        Ok(report)
    } else {
        Ok(run_cycle(&s, &fleet, &mut LocalDriver::new(pipeline))?)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CalibrationLine {
    Observation { confidence: f64, correct: bool },
    Pair(EvalPair),
}

#[derive(Serialize)]
struct CalibrationReport {
    n: usize,
    ece: f64,
    bins: Vec<CalibrationBin>,
}

#[derive(Serialize)]
struct RollbackReport {
    current: u64,
    previous: u64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Serve { config } => {
            let config = load_config(config.as_deref())?;
            sentinel_server::run(config)?;
            Ok(())
        }
        Command::Simulate { scenario, seed, vehicles, lambda, dir, http, out } => {
            let s = match scenario {
                Some(p) => SimScenario::load(&p)?,
                None => SimScenario::default(),
            };
            let report = simulate(s, seed, vehicles, lambda, dir.as_deref(), http)?;
            emit(&report.to_json(), out.as_deref())
        }
        Command::Eval { pairs, bins, rules, out } => {
            let rules = match rules {
                Some(p) => ServiceConfig { format_rules: Some(p), ..ServiceConfig::default() }
                    .rules()
                    .map_err(|e| CliError::Config(e.to_string()))?,
                None => default_rules(),
            };
            let pairs: Vec<EvalPair> = read_jsonl(&pairs)?;
            let report = evaluate(&pairs, bins, &rules).map_err(|e| CliError::Data(e.to_string()))?;
            emit_json(&report, out.as_deref())
        }
        Command::Calibrate { log, bins, out } => {
            let lines: Vec<CalibrationLine> = read_jsonl(&log)?;
            let obs: Vec<(f64, bool)> = lines
                .into_iter()
                .map(|l| match l {
                    CalibrationLine::Observation { confidence, correct } => (confidence, correct),
                    CalibrationLine::Pair(p) => (p.confidence, p.is_exact()),
                })
                .collect();
            let (ece, bins) = ece_from_observations(&obs, bins).map_err(|e| CliError::Data(e.to_string()))?;
            emit_json(&CalibrationReport { n: obs.len(), ece, bins }, out.as_deref())
        }
        Command::LoraParams { layers, modules, dim, rank, out } => {
            let n = lora_param_count(layers, modules, dim, rank).map_err(|e| CliError::Data(e.to_string()))?;
            emit(&n.to_string(), out.as_deref())
        }
        Command::Rollback { registry, config } => {
            let root = match registry {
                Some(r) => r,
                None => load_config(config.as_deref())?.registry_path(),
            };
            let reg = Registry::open(&root).map_err(|e| CliError::Data(e.to_string()))?;
            let (current, previous) = reg.rollback().map_err(|e| CliError::Data(e.to_string()))?;
            emit_json(&RollbackReport { current, previous }, None)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sentinel: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
