//! `oeem`: command-line front end for echo-modulation simulation and
//! analysis. Outputs are CSV and TOML files in the output directory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "oeem", version, about = "Optical echo envelope modulation: couplings, traces, spectra, fits")]
struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// g-tensor file (TOML with `ground` and `excited` 3x3 rows, D1-D2-b frame).
    #[arg(long, global = true, value_name = "FILE")]
    g_tensor_file: Option<PathBuf>,

    /// Named variant inside the g-tensor file.
    #[arg(long, global = true, value_name = "NAME")]
    g_tensor_variant: Option<String>,

    /// Site catalog override (TOML `[[site]]` records, positions in angstrom).
    #[arg(long, global = true, value_name = "FILE")]
    site_file: Option<PathBuf>,

    /// Directory for all output files [default: oeem-out].
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Seed for every random draw [default: 1].
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Nuclear g-factor of the bath spins (dimensionless) [default: -0.2737].
    #[arg(long, global = true, allow_hyphen_values = true)]
    g_y: Option<f64>,

    #[command(subcommand)]
    command: commands::Command,
}

#[derive(Debug, Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    code: u8,
    message: String,
}

fn exit_code(kind: &str) -> u8 {
    match kind {
        "ConfigError" => 3,
        "IoError" => 4,
        "InvalidInput" => 5,
        "ZeroField" | "ZeroDistance" => 6,
        "FitFailure" => 7,
        "InsufficientData" => 8,
        "ValidationFailure" => 9,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = RunConfig::resolve(Overrides {
        config: cli.config,
        g_tensor_file: cli.g_tensor_file,
        g_tensor_variant: cli.g_tensor_variant,
        site_file: cli.site_file,
        output_dir: cli.output_dir,
        seed: cli.seed,
        g_y: cli.g_y,
    })
    .map_err(commands::Failure::from)
    .and_then(|cfg| commands::run(&cfg, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let code = exit_code(kind);
            let line = ErrorLine {
                error: kind,
                code,
                message: e.to_string(),
            };
            eprintln!(
                "{}",
                serde_json::to_string(&line).unwrap_or_else(|_| format!("{{\"error\":\"{kind}\"}}"))
            );
            ExitCode::from(code)
        }
    }
}

impl commands::Failure {
    fn kind(&self) -> &'static str {
        match self {
            commands::Failure::Core(e) => e.kind(),
            commands::Failure::Validation(_) => "ValidationFailure",
        }
    }
}
