//! `garment-detail`: bake, train, classify, enhance, lift and evaluate
//! garment normal maps from the command line.

mod commands;
mod config;
mod data;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::PipelineConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<detail_core::Error> for CliError {
    fn from(e: detail_core::Error) -> Self {
        use detail_core::Error as E;
        match e {
            E::Parameter(_) | E::Material(_) | E::Spec(_) => CliError::Config(e.to_string()),
            E::Numerical(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<detail_nets::Error> for CliError {
    fn from(e: detail_nets::Error) -> Self {
        use detail_nets::Error as E;
        match e {
            E::Core(inner) => inner.into(),
            E::Config(_) => CliError::Config(e.to_string()),
            E::Numerical(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "garment-detail", version, about = "Patch-based wrinkle detail enhancement for garment normal maps")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML configuration file; built-in defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every randomised stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory receiving the command's artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print or check the configuration.
    Config(commands::ConfigArgs),
    /// Render a procedural coarse/fine pair sequence.
    Generate(commands::GenerateArgs),
    /// Bake mesh sequences into normal maps.
    Bake(commands::BakeArgs),
    /// Train the enhancer on pair sequences.
    Train(commands::TrainArgs),
    /// Train the material classifier or vote on sequences.
    #[command(subcommand)]
    Classify(commands::ClassifyCommand),
    /// Enhance a coarse normal-map sequence.
    Enhance(commands::EnhanceArgs),
    /// Lift enhanced maps back onto subdivided coarse meshes.
    Lift(commands::LiftArgs),
    /// Improvement and distribution metrics for a coarse/enhanced/reference triple.
    Eval(commands::EvalArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    }
    if let Command::Config(args) = &cli.command {
        return commands::config(&cli.global, args);
    }
    let cfg = match &cli.global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    }
    .with_seed(cli.global.seed);
    let out = &cli.global.out;
    match cli.command {
        Command::Config(_) => unreachable!(),
        Command::Generate(a) => commands::generate(&cfg, out, &a),
        Command::Bake(a) => commands::bake(&cfg, out, &a),
        Command::Train(a) => commands::train(&cfg, out, &a),
        Command::Classify(c) => commands::classify(&cfg, out, &c),
        Command::Enhance(a) => commands::enhance(&cfg, out, &a),
        Command::Lift(a) => commands::lift(&cfg, out, &a),
        Command::Eval(a) => commands::eval(&cfg, out, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
