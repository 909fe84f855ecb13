use clap::{Parser, Subcommand};
use kamflow_cli::{commands, config};
use std::path::PathBuf;
use std::process::ExitCode;

/// Asymptotic-torus solver and biasymptotic orbit gluer.
#[derive(Parser)]
#[command(name = "kamflow", version, about)]
struct Cli {
    /// Path to the JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for reports and series
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the configured random seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count (accepted for interface compatibility; the
    /// computation is sequential so results never depend on it)
    #[arg(long, global = true, env = "KAMFLOW_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the asymptotic-torus families over the parameter grid
    Solve,
    /// Glue both families at time zero through a list of targets
    Glue {
        /// JSON file with [{"q": .., "p": ..}, ...] targets
        #[arg(long)]
        targets: PathBuf,
    },
    /// Run the full self-check suite and write verify.json
    Verify,
    /// Check the weighted-norm algebra inequalities
    Norms,
    /// Evaluate the quadrature tail constants against their limits
    TailConstants,
}

fn run() -> anyhow::Result<i32> {
    let cli = Cli::parse();
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| anyhow::anyhow!("--config PATH is required"))?;
    let mut cfg = config::load_config(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            anyhow::bail!("--threads must be >= 1");
        }
    }
    match &cli.command {
        Command::Solve => commands::cmd_solve(&cfg, &cli.out),
        Command::Glue { targets } => commands::cmd_glue(&cfg, targets, &cli.out),
        Command::Verify => commands::cmd_verify(&cfg, &cli.out),
        Command::Norms => commands::cmd_norms(&cfg, &cli.out),
        Command::TailConstants => commands::cmd_tail_constants(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(0) => ExitCode::from(0),
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
