//! `reskit` command-line front end. All reports are canonical JSON (sorted
//! keys, 17-digit floats, LF endings) so identical inputs give identical
//! bytes. Exit codes: 0 success, 2 input error, 3 internal numerical
//! failure. Logging is controlled by the `RESKIT_LOG` env variable.

mod commands;
mod config;
mod errors;
mod jsonio;
mod traceio;

use clap::{Parser, Subcommand};
use errors::CliError;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "reskit", version, about = "Superconducting resonator analysis toolkit")]
struct Cli {
    /// JSON config file (required by `synth` and `xrd`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base RNG seed for synthesis and bootstrap.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 keeps the library default.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Bootstrap iterations; 0 skips the bootstrap (point estimates only).
    #[arg(long, global = true, default_value_t = 100_000)]
    iterations: usize,
    /// Line attenuation in dB (nonpositive).
    #[arg(long = "atten-db", global = true, default_value_t = -75.0, allow_hyphen_values = true)]
    atten_db: f64,
    /// Sample temperature in kelvin.
    #[arg(long = "temp-k", global = true, default_value_t = 0.015)]
    temp_k: f64,
    /// Source power the loss budget is evaluated at, in dBm.
    #[arg(long = "eval-power-dbm", global = true, default_value_t = 10.0, allow_hyphen_values = true)]
    eval_power_dbm: f64,
    /// Nonlinearity a_n0 above which a trace counts as nonlinear.
    #[arg(long = "regime-threshold", global = true, default_value_t = 0.05)]
    regime_threshold: f64,
    /// Output file (reports) or directory (`synth`, `sweep`); stdout when
    /// omitted where a single file is produced.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize traces from --config into the output directory.
    Synth,
    /// Fit a single trace CSV and print the full fit result.
    Fitone {
        /// Trace CSV (`freq_hz,s21_re,s21_im`).
        trace: PathBuf,
        /// Source power of the trace in dBm.
        #[arg(long = "power-dbm", default_value_t = -100.0, allow_hyphen_values = true)]
        power_dbm: f64,
        /// Fixed cable delay in seconds; skips the delay fit.
        #[arg(long = "tau-s", allow_hyphen_values = true)]
        tau_s: Option<f64>,
    },
    /// Fit a power sweep manifest: per-trace fits, TLS model, loss budget.
    Sweep {
        /// Sweep manifest JSON.
        manifest: PathBuf,
    },
    /// Extract E* and a_n0 with bootstrap CIs from a sweep manifest.
    Nonlin {
        /// Sweep manifest JSON.
        manifest: PathBuf,
    },
    /// Fit 1/alpha_L vs width per end type from a points CSV.
    Kinetic {
        /// CSV with header `width_um,f_meas_hz,f_design_hz,end_type`.
        points: PathBuf,
    },
    /// Fit diffractogram peaks and derive lattice spacing and strain.
    Xrd {
        /// CSV with header `two_theta_deg,counts`.
        diffractogram: PathBuf,
    },
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth => {
            let config = cli
                .config
                .as_deref()
                .ok_or_else(|| CliError::input("synth requires --config"))?;
            let out_dir = cli.output.as_deref().unwrap_or_else(|| ".".as_ref());
            commands::synth::run(config, out_dir, cli.seed)
        }
        Command::Fitone {
            trace,
            power_dbm,
            tau_s,
        } => commands::fitone::run(
            trace,
            *power_dbm,
            *tau_s,
            cli.atten_db,
            cli.temp_k,
            cli.output.as_deref(),
        ),
        Command::Sweep { manifest } => commands::sweep::run(
            manifest,
            cli.seed,
            cli.eval_power_dbm,
            cli.regime_threshold,
            cli.output.as_deref(),
        ),
        Command::Nonlin { manifest } => commands::nonlin::run(
            manifest,
            cli.seed,
            cli.iterations,
            cli.output.as_deref(),
        ),
        Command::Kinetic { points } => commands::kinetic::run(points, cli.output.as_deref()),
        Command::Xrd { diffractogram } => {
            let config = cli
                .config
                .as_deref()
                .ok_or_else(|| CliError::input("xrd requires --config"))?;
            commands::xrd::run(diffractogram, config, cli.output.as_deref())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RESKIT_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        // build_global fails only if a pool already exists; keep it then
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
