use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use metafn_cli::{run, Command, RunConfig};

/// Cross-table pretraining, calibration and evaluation of CaLinear transformers.
#[derive(Parser)]
#[command(name = "metafn", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `--set model.M=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = RunConfig::load(&args.config, &args.overrides).and_then(|c| run(args.command, &c));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metafn {}: error: {e}", args.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
