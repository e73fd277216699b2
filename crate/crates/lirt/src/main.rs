use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lirt::{run, CliError, Command, Overrides, RunConfig};

/// Longitudinal graded-response IRT models.
#[derive(Parser)]
#[command(name = "lirt", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of QMC nodes for the likelihood.
    #[arg(long)]
    qmc: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = (|| -> Result<PathBuf, CliError> {
        let bytes = std::fs::read(&args.config).map_err(|e| CliError::io(&args.config, e))?;
        let mut cfg = RunConfig::load(&args.config)?;
        cfg.apply(&Overrides {
            seed: args.seed,
            n_qmc: args.qmc,
            output_dir: args.out.clone(),
        });
        cfg.validate()?;
        run(args.command, &cfg, &bytes, args.threads)
    })();
    match result {
        Ok(dir) => {
            eprintln!("lirt {}: wrote {}", args.command.name(), dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lirt {}: {e}", args.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
