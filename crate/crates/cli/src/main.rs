use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selguide_core::selftest::FaultInjection;
use selguide_core::{Error, ErrorCategory};

mod commands;
mod config;

use commands::{Manifest, ServeArgs};
use config::{Overrides, RunConfig};

const EXIT_CONFIG: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_PROTOCOL: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_SELFTEST: u8 = 5;

/// Staged, region-selective guided diffusion restoration for damaged face photos.
///
/// Exit codes: 0 success, 1 config, 2 IO, 3 protocol/denoiser, 4 non-finite
/// numerics, 5 selftest failure.
#[derive(Debug, Parser)]
#[command(name = "selguide", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a pseudo-label from the degraded image under weak guidance.
    PseudoLabel(Overrides),
    /// Run the full two-pass restoration.
    Restore(Overrides),
    /// Compute the metrics table for the entries of a manifest.
    Metrics {
        /// TOML manifest with `[[entry]]` tables.
        #[arg(long, short = 'm')]
        manifest: PathBuf,
        /// Also write the table to this file.
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Restore every input over a grid of (s_w, s_s, t1) values.
    Sweep(Overrides),
    /// Run the built-in property checks on analytic backends.
    Selftest {
        /// Smaller instance counts.
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true)]
        flip_fidelity_sign: bool,
    },
    /// Serve the denoiser wire protocol (echo or analytic Gaussian).
    #[command(hide = true)]
    Serve(ServeArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => EXIT_CONFIG,
        ErrorCategory::Io => EXIT_IO,
        ErrorCategory::Protocol => EXIT_PROTOCOL,
        ErrorCategory::Numeric => EXIT_NUMERIC,
    }
}

fn run(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::PseudoLabel(o) => {
            let cfg = RunConfig::resolve(&o)?;
            let rows = commands::pseudo_label(&cfg)?;
            eprintln!("wrote {} pseudo-label(s) under {}", rows.len(), cfg.output_dir()?.display());
        }
        Command::Restore(o) => {
            let cfg = RunConfig::resolve(&o)?;
            let rows = commands::restore_cmd(&cfg)?;
            eprintln!("restored {} input(s) under {}", rows.len(), cfg.output_dir()?.display());
        }
        Command::Metrics { manifest, output } => {
            let m = Manifest::load(&manifest)?;
            let table = commands::metrics_cmd(&m)?;
            let text = table.render();
            if let Some(p) = output {
                std::fs::write(p, &text)?;
            }
            print!("{text}");
        }
        Command::Sweep(o) => {
            let cfg = RunConfig::resolve(&o)?;
            print!("{}", commands::sweep_cmd(&cfg)?.render());
        }
        Command::Selftest { quick, flip_fidelity_sign } => {
            let report = commands::selftest_cmd(quick, FaultInjection { flip_fidelity_sign });
            println!("{report}");
            if !report.all_passed() {
                return Ok(EXIT_SELFTEST);
            }
        }
        Command::Serve(args) => commands::serve_cmd(&args)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
