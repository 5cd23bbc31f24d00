use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use qbound::commands::{run, Overrides};
use qbound::config::{Command, RunConfig};

/// Quantum estimation bounds, purification checks and protocol simulation.
#[derive(Parser, Debug)]
#[command(name = "qbound", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for `simulate`; defaults to QBOUND_WORKERS, then all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let overrides = Overrides {
        seed: args.seed,
        workers: args.workers,
        out: args.out,
    };
    let result = RunConfig::load(&args.config).and_then(|config| run(args.command, config, &overrides));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
