use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use difrec_cli::{format_metrics, run, CliError, Command, RunConfig};

/// Text-conditioned latent diffusion pipeline for cross-modal recognition.
#[derive(Parser)]
#[command(name = "difrec", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// key = value configuration file
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(args: &Args) -> Result<String, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed)?;
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    Ok(format_metrics(&run(args.command, &cfg, &out)?))
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(lines) => {
            print!("{}", lines);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("difrec: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
