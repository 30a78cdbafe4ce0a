mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use crate::commands::{BenchGradFlags, EvalFlags, FitTeacherFlags, ShiftFlags, SynthFlags, TrainFlags};
use crate::config::ConfigFile;
use crate::error::CliError;

/// Align two embedding spaces from a few pairs plus unpaired data.
#[derive(Debug, Parser)]
#[command(name = "otalign", version)]
struct Cli {
    /// Run seed; every random choice derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON file with `seed`, `out` and one object of options per command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic paired, unpaired and held-out embeddings.
    Synth(SynthFlags),
    /// Fit a linear teacher on paired embeddings.
    FitTeacher(FitTeacherFlags),
    /// Train alignment layers with the teacher-guided regularizer.
    Train(TrainFlags),
    /// Retrieval recall or zero-shot classification accuracy.
    Eval(EvalFlags),
    /// Distribution shift between the unpaired pool and the paired set.
    Shift(ShiftFlags),
    /// Memory and time of closed-form vs unrolled Sinkhorn gradients.
    BenchGrad(BenchGradFlags),
}

/// Settings shared by every command after config-file merging.
pub struct Global {
    pub seed: u64,
    pub out: PathBuf,
    pub file: ConfigFile,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    let global = Global {
        seed: cli.seed.or(file.seed()?).unwrap_or(0),
        out: cli.out.clone().or(file.out()?).unwrap_or_else(|| PathBuf::from("out")),
        file,
    };
    std::fs::create_dir_all(&global.out).map_err(|e| CliError::Io(format!("{}: {e}", global.out.display())))?;
    match &cli.command {
        Command::Synth(f) => commands::synth(&global, f),
        Command::FitTeacher(f) => commands::fit_teacher(&global, f),
        Command::Train(f) => commands::train(&global, f),
        Command::Eval(f) => commands::eval(&global, f),
        Command::Shift(f) => commands::shift(&global, f),
        Command::BenchGrad(f) => commands::bench_grad(&global, f),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
