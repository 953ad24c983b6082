use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use llab::config::{parse_config, ExperimentConfig};
use llab::grid::{emit_plot_data, pareto_from_dir, run_grid, run_spectrum};
use llab::Error;

/// Lottery-ticket and frozen-weight retraining experiments.
#[derive(Parser)]
#[command(name = "llab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of the configured grid.
    Run {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Output root; overrides the config's output_dir.
        #[arg(long, env = "LLAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Hessian spectra at W^k * M for the given k and R values.
    Spectrum {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        r: Option<Vec<f64>>,
        #[arg(long, env = "LLAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Recompute the Pareto table of a result directory.
    Pareto { dir: PathBuf },
    /// Write plot-ready CSVs for a result directory.
    Plots { dir: PathBuf },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNS: u8 = 2;
const EXIT_IO: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ConfigViolations(_) => EXIT_CONFIG,
        Error::Path { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format { .. } => EXIT_IO,
        _ => EXIT_RUNS,
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    parse_config(path).map_err(|e| match e {
        // an unreadable config file is a configuration problem for the caller
        Error::Path { path, source } => Error::Config(format!("{}: {source}", path.display())),
        other => other,
    })
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run { config, workers, out } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let summary = run_grid(&cfg, &out, workers)?;
            println!("{} runs, {} failed; results in {}", summary.rows.len(), summary.failures, out.display());
            Ok(if summary.failures > 0 { EXIT_RUNS } else { 0 })
        }
        Command::Spectrum { config, k, r, out } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let records = run_spectrum(&cfg, &out, k.as_deref(), r.as_deref())?;
            for rec in &records {
                let label = if rec.reference { "ref".to_string() } else { format!("R={}", rec.retain) };
                println!(
                    "k={} {label}: near_zero_mass={:.4} lambda=[{:.4e}, {:.4e}]",
                    rec.k, rec.flatness.near_zero_mass, rec.flatness.lambda_min, rec.flatness.lambda_max
                );
            }
            Ok(0)
        }
        Command::Pareto { dir } => {
            let path = pareto_from_dir(&dir)?;
            println!("{}", path.display());
            Ok(0)
        }
        Command::Plots { dir } => {
            for p in emit_plot_data(&dir)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
