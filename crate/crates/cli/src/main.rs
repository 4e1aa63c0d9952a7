//! `hgs`: instance generation, training, evaluation and single-instance
//! solving for the heterogeneous graph scheduler.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "hgs", version, about = "Heterogeneous graph scheduler for FJSPT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write `count` random instances with seeds seed, seed+1, ...
    Generate(GenerateArgs),
    /// Train a policy from a JSON config.
    Train(TrainArgs),
    /// Benchmark methods over a directory of instances.
    Eval(EvalArgs),
    /// Solve one instance and export its schedule.
    Solve(SolveArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub v: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, env = "HGS_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed. Falls back to HGS_SEED when the config
    /// has none.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for outputs the config leaves unset.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GaArgs {
    #[arg(long, default_value_t = 50)]
    pub ga_population: usize,
    #[arg(long, default_value_t = 100)]
    pub ga_generations: usize,
    /// Per-instance GA wallclock limit in seconds.
    #[arg(long)]
    pub ga_time_budget: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub instances: PathBuf,
    /// Comma-separated subset of hgs, spt, lpt, fifo, ga, random, optimal.
    #[arg(long, default_value = "hgs,spt,lpt,fifo,ga")]
    pub methods: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "HGS_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub ga: GaArgs,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long, default_value = "spt")]
    pub method: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `.svg` for a Gantt chart, anything else for schedule CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "HGS_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub ga: GaArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // help and version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&CliError::usage(e.kind().to_string(), first_line(&e.to_string()))),
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Solve(a) => commands::solve(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or_default().trim_start_matches("error: ").to_string()
}

fn report(e: &CliError) -> ExitCode {
    eprintln!("{}", e.line());
    ExitCode::from(e.exit_code())
}
