//! Batch pipeline: prepare -> fit / select -> predict -> bootstrap -> report.
//!
//! Exit status: 0 success, 1 model or numerical failure, 2 usage or I/O
//! failure.

mod commands;
mod config;
mod error;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use smsn_nlme::data_io::fixture_path;
use smsn_nlme::estimation::Family;

use commands::{BootstrapArgs, InputFormat, PrepareArgs};

#[derive(Parser)]
#[command(name = "smsn-nlme", version, about = "Robust NLME epidemic-curve fitting with SMSN random effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn family(s: &str) -> Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Build a scaled panel from cumulative death counts.
    Prepare {
        /// Input CSV; defaults to the snapshot in the fixture directory
        /// (`SMSN_NLME_FIXTURE_DIR`).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = InputFormat::Jhu)]
        format: InputFormat,
        /// Comma-separated region names.
        #[arg(long, value_delimiter = ',', required = true)]
        countries: Vec<String>,
        /// Last date to include (YYYY-MM-DD).
        #[arg(long)]
        through: NaiveDate,
        /// Scaling constant; defaults to the smallest subject standard deviation.
        #[arg(long)]
        k_z: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one family.
    Fit {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, value_parser = family)]
        family: Family,
        /// TOML file with `[fit]` and `[bootstrap]` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit several families and rank them by AIC and BIC.
    Select {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = family, required = true)]
        families: Vec<Family>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cumulative death forecasts at days after the snapshot.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "30,60,90,150")]
        horizons: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parametric bootstrap bands, horizon intervals and peak intervals.
    Bootstrap {
        #[arg(long)]
        fit: PathBuf,
        /// Number of replicates.
        #[arg(long = "M")]
        replicates: Option<usize>,
        #[arg(long)]
        trim: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 0 uses every core.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-subject plot data and SVG charts.
    Report {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        bootstrap: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prepare { input, format, countries, through, k_z, out } => commands::prepare(&PrepareArgs {
            input: input.unwrap_or_else(fixture_path),
            format,
            countries,
            through,
            k_z,
            out,
        }),
        Command::Fit { panel, family, config, out } => commands::fit_cmd(&panel, family, config.as_deref(), &out),
        Command::Select { panel, families, config, out } => {
            commands::select(&panel, &families, config.as_deref(), &out)
        }
        Command::Predict { fit, horizons, out } => commands::predict(&fit, &horizons, &out),
        Command::Bootstrap { fit, replicates, trim, alpha, seed, workers, config, out } => {
            commands::bootstrap(&BootstrapArgs { fit, replicates, trim, alpha, seed, workers, config, out })
        }
        Command::Report { fit, bootstrap, out } => commands::report(&fit, bootstrap.as_deref(), &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
