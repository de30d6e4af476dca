use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use drupi_cli::{inspect, load_config, metrics, resolve, run, sweep, Axis};

/// Dataset reduction with synthesized privileged information.
#[derive(Parser)]
#[command(name = "drupi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate and print the resolved config without running.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run a grid of configs derived from a base config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Axis such as `lambda_task=0,0.001,0.1,10`; repeat for a product grid.
        /// Parameters: lambda_task, lambda_reg, n_feat, tap.
        #[arg(long = "grid", required = true)]
        grid: Vec<Axis>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Print the header of a reduced-dataset container as JSON.
    Inspect { container: PathBuf },
    /// Diversity and discriminability of a container's privileged labels.
    Metrics {
        container: PathBuf,
        /// Seed of the clustering step.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DRUPI_THREADS") {
        let n: usize = v.parse().with_context(|| format!("DRUPI_THREADS=`{v}` is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn report_failures(failed: usize) -> ExitCode {
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{failed} seed run(s) failed; see the status column of the summary");
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    init_threads()?;
    match cli.command {
        Command::Run { config, seed, out, dry_run } => {
            let cfg = resolve(load_config(&config)?, seed, out)?;
            if dry_run {
                print!("{}", cfg.to_toml()?);
                return Ok(ExitCode::SUCCESS);
            }
            Ok(report_failures(run(&cfg)?))
        }
        Command::Sweep { config, grid, seed, out, dry_run } => {
            let cfg = resolve(load_config(&config)?, seed, out)?;
            if dry_run {
                for point in drupi_cli::grid_points(&grid) {
                    let c = drupi_cli::apply_point(&cfg, &point)?;
                    println!("# {point:?}\n{}", c.to_toml()?);
                }
                return Ok(ExitCode::SUCCESS);
            }
            Ok(report_failures(sweep(&cfg, &grid)?))
        }
        Command::Inspect { container } => {
            println!("{}", inspect(&container)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { container, seed } => {
            println!("{}", serde_json::to_string_pretty(&metrics(&container, seed)?)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
