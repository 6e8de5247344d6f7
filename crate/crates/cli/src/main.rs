use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use mfprice_cli::config::{parse_config, Command, ModeName, Overrides};
use mfprice_cli::run::execute;

/// Discretized mean-field equilibrium prices for an informed/standard market.
#[derive(Parser)]
#[command(name = "mfprice", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Conditioning keys: full node prefix or current node only.
    #[arg(long, value_enum)]
    mode: Option<ModeName>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let over = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir,
        mode: cli.mode,
        damping: cli.damping,
        tol: cli.tol,
        max_iter: cli.max_iter,
        samples: cli.samples,
    };
    let start = Instant::now();
    let outcome = parse_config(&cli.config, cli.command, &over).and_then(|spec| execute(&spec));
    match outcome {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            eprintln!("artifacts in {} ({:.1}s)", outcome.dir.display(), start.elapsed().as_secs_f64());
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
