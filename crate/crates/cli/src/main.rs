use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use mfcrand_cli::run::{execute, Format};
use mfcrand_cli::suites::SUITES;
use mfcrand_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mfcrand", version, about = "Verification suites for control randomisation on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Direct value against the randomised backward equation, with the exact identities.
    Equivalence,
    /// Penalisation sweep, monotonicity and the constrained limit.
    Bsde,
    /// Randomised dynamic programming residuals.
    Dpp,
    /// The one-dimensional decoupling counterexample.
    Example,
    /// Density martingale checks.
    Girsanov,
    /// Point-process approximation of decomposed controls.
    Approx,
    /// Every suite in turn.
    All,
}

impl Command {
    fn suites(self) -> Vec<&'static str> {
        match self {
            Command::Equivalence => vec!["equivalence"],
            Command::Bsde => vec!["bsde"],
            Command::Dpp => vec!["dpp"],
            Command::Example => vec!["example"],
            Command::Girsanov => vec!["girsanov"],
            Command::Approx => vec!["approx"],
            Command::All => SUITES.to_vec(),
        }
    }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config {
        path: "--config".into(),
        message: "a config file is required".into(),
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config {
                path: "--threads".into(),
                message: e.to_string(),
            })?;
    }
    let mut all_pass = true;
    for suite in cli.command.suites() {
        let start = Instant::now();
        let out = execute(&cfg, &[suite], &cli.out.join(suite), cli.format)?;
        for o in &out {
            for c in &o.checks {
                println!("[{suite}] {}", c.line());
            }
            all_pass &= o.passed();
        }
        eprintln!("[{suite}] {:.1} s", start.elapsed().as_secs_f64());
    }
    Ok(all_pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
