//! Batch experiment runner: one subcommand per analysis, JSON configs with
//! dotted-path overrides, canonical `report.json` plus CSV data.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

/// Environment variable that overrides the output directory of the config.
pub const OUT_DIR_ENV: &str = "ESPLAB_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] esplab::Error),
    #[error("output error: {0}")]
    Output(String),
    /// The report was written but the computation did not resolve.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Numerical(_) => 3,
            CliError::Output(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "esplab", version, about = "Echo-state experiments for state-space systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; replaces every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (takes precedence over the environment and config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override a config field, e.g. `--set solver.horizon=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run the state equation forward over the input window.
    Simulate,
    /// Check the echo state property by pullback.
    Esp,
    /// Count solutions of one input.
    EchoIndex,
    /// Response of the solution set to input perturbations.
    Fmp,
    /// Echo-index histogram over random inputs.
    Scan,
    /// Forward trajectories from given starting states.
    Forward,
    /// Pullback particle measure and solution checks.
    StochSolve,
    /// Transport response of the pullback measure to an input-law change.
    StochFmp,
    /// Causal extension and conditional-independence tests.
    Causality,
    /// Shift periodicity of the pullback measure.
    Periodicity,
    /// Kalman, augmented Kalman, particle or grid filtering.
    Filter,
    /// Three solutions versus one for the Kloeden map.
    ExampleKloeden,
    /// Contracting linear system against its closed form.
    ExampleLinear,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Esp => "esp",
            Command::EchoIndex => "echo-index",
            Command::Fmp => "fmp",
            Command::Scan => "scan",
            Command::Forward => "forward",
            Command::StochSolve => "stoch-solve",
            Command::StochFmp => "stoch-fmp",
            Command::Causality => "causality",
            Command::Periodicity => "periodicity",
            Command::Filter => "filter",
            Command::ExampleKloeden => "example-kloeden",
            Command::ExampleLinear => "example-linear",
        }
    }
}

/// Runs one subcommand and returns the path of its report.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let loaded = config::load(cli.common.config.as_deref(), cli.common.seed, &cli.common.set)?;
    let dir = cli
        .common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| loaded.config.output_dir.as_ref().map(|p| config::resolve(&loaded.base_dir, p)))
        .unwrap_or_else(|| PathBuf::from("esplab-out"));
    let mut out = report::Output::create(&dir)?;
    let result = commands::dispatch(cli.command, &loaded, &mut out)?;
    let failure = result.get("numerical_failure").and_then(|v| v.as_str()).map(String::from);
    let path = out.report(cli.command.name(), &resolved_config(cli.command, &loaded)?, result)?;
    match failure {
        Some(msg) => Err(CliError::Numerical(format!("{msg} (report at {})", path.display()))),
        None => Ok(path),
    }
}

/// The typed config with defaults filled in and unset sections dropped.
fn resolved_config(cmd: Command, loaded: &config::Loaded) -> Result<serde_json::Value, CliError> {
    let mut cfg = loaded.config.clone();
    if matches!(cmd, Command::ExampleKloeden) && cfg.example.is_none() {
        cfg.example = Some(config::ExampleSection::default());
    }
    let mut v = serde_json::to_value(&cfg).map_err(|e| CliError::Output(e.to_string()))?;
    // nested seeds defaulted by serde are replaced by the root seed at run time
    if let Some(seed) = cfg.seed {
        config::propagate_seed(&mut v, seed);
    }
    if let serde_json::Value::Object(map) = &mut v {
        map.retain(|_, v| !v.is_null());
    }
    Ok(v)
}
