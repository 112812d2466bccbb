use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use envshift::cli::{run, Command, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "envshift",
    version,
    about = "Shift-aware traffic forecasting experiments"
)]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the first seed of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Aggregate a trip CSV into a traffic cube.
    Ingest,
    /// Generate a synthetic cube.
    Synth,
    /// Train one variant and write its checkpoint, weights and log.
    Train,
    /// Score the trained checkpoint on the test month.
    Evaluate,
    /// Run every configured variant for every seed.
    Ablate,
    /// Grid search over alpha and beta.
    Sweep,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Ingest => Command::Ingest,
            Cmd::Synth => Command::Synth,
            Cmd::Train => Command::Train,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Ablate => Command::Ablate,
            Cmd::Sweep => Command::Sweep,
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let Some(config) = args.config else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    let result = ExperimentConfig::load(&config)
        .map(|cfg| cfg.with_overrides(args.seed, args.out))
        .and_then(|cfg| run(args.command.into(), &cfg));
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
