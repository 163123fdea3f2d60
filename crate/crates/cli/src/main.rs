//! `polaron`: experiments on the tilted cluster representation of the polaron path measure.

mod commands;
mod config;
mod extract;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Failure;
use config::Flags;

#[derive(Parser)]
#[command(name = "polaron", version = output::VERSION, about = "Monte Carlo experiments for the polaron path measure")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Solve q(lambda) = 1 for the tilt.
    SolveLambda,
    /// Estimate q(lambda) with a divergence watch.
    EstimateQ,
    /// Effective diffusion constant; `--samples` adds a windowed cross-check.
    Sigma2,
    /// One stationary window and a path on an even grid.
    SamplePath,
    /// Finite-horizon second moment (or indicator with `--threshold`).
    FiniteT,
    /// Path-space chain reference at finite horizon.
    Oracle {
        /// Include per-step traces in the chain records.
        #[arg(long)]
        traces: bool,
    },
    /// Deterministic Lyapunov, drift and determinant checks.
    Checks,
    /// Convert JSON lines to CSV.
    ExtractCsv {
        /// JSON-lines file, or `-` for stdin.
        input: Option<PathBuf>,
        /// Keep only records of this kind.
        #[arg(long)]
        record: Option<String>,
        /// Emit one row per element of this array field, e.g. `data.rows`.
        #[arg(long)]
        explode: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = cli.flags.resolve().map_err(Failure::Usage).and_then(|flags| {
        if let Some(n) = flags.threads {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("thread pool already initialized: {e}");
            }
        }
        match &cli.command {
            Command::SolveLambda => commands::solve_lambda(&flags),
            Command::EstimateQ => commands::estimate_q(&flags),
            Command::Sigma2 => commands::sigma2(&flags),
            Command::SamplePath => commands::sample_path(&flags),
            Command::FiniteT => commands::finite_t(&flags),
            Command::Oracle { traces } => commands::oracle(&flags, *traces),
            Command::Checks => commands::checks(&flags),
            Command::ExtractCsv { input, record, explode } => {
                commands::extract_csv(input.as_deref(), flags.out.as_deref(), record.as_deref(), explode.as_deref())
            }
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, exit, detail) = match f {
                Failure::Usage(u) => ("usage", 2, serde_json::json!({"field": u.field, "message": u.message})),
                Failure::Module(e) => (e.code(), 1, serde_json::json!({"message": e.to_string()})),
                Failure::Io(e) => ("io", 1, serde_json::json!({"message": e.to_string()})),
                Failure::Checks => ("checks_failed", 1, serde_json::json!({"message": "one or more checks failed"})),
            };
            let mut obj = serde_json::json!({"error": code});
            if let (Some(o), serde_json::Value::Object(d)) = (obj.as_object_mut(), detail) {
                o.extend(d);
            }
            eprintln!("{obj}");
            ExitCode::from(exit)
        }
    }
}
