use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dpgossip::experiment::{budget_report, run_experiment, ExperimentSpec};

#[derive(Parser)]
#[command(name = "dpgossip", version, about = "Differentially private sparsified gossip SGD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every sweep point for every seed and write CSVs and manifests.
    Run {
        spec: PathBuf,
        /// Output directory (overrides `output_dir` in the spec file).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record metrics every N iterations.
        #[arg(long)]
        stride: Option<u64>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print calibrated noise and the privacy ledger for each sweep point.
    Budget { spec: PathBuf },
    /// Check a spec without running it.
    Validate { spec: PathBuf },
}

/// Exit status for failures that happen before any run starts.
const VALIDATION: u8 = 1;
const RUNTIME: u8 = 2;

fn load(path: &PathBuf) -> Result<ExperimentSpec, ExitCode> {
    let loaded = ExperimentSpec::load(path)
        .with_context(|| format!("loading {}", path.display()))
        .and_then(|spec| {
            spec.validate().with_context(|| format!("validating {}", path.display()))?;
            Ok(spec)
        });
    loaded.map_err(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(VALIDATION)
    })
}

fn execute(command: Command) -> Result<(), ExitCode> {
    match command {
        Command::Validate { spec } => {
            let parsed = load(&spec)?;
            let shape = parsed.validate().expect("validated above");
            println!(
                "ok: {} agents, {} samples each, dimension {}, {} sweep points x {} seeds",
                shape.n,
                shape.q,
                shape.d,
                parsed.points().len(),
                parsed.seeds.len()
            );
        }
        Command::Budget { spec } => {
            let parsed = load(&spec)?;
            let report = budget_report(&parsed).map_err(|e| {
                eprintln!("error: {e}");
                ExitCode::from(VALIDATION)
            })?;
            print!("{report}");
        }
        Command::Run { spec, out, stride, workers } => {
            let parsed = load(&spec)?;
            if stride == Some(0) || workers == Some(0) {
                eprintln!("error: --stride and --workers must be positive");
                return Err(ExitCode::from(VALIDATION));
            }
            if out.is_none() && parsed.output_dir.is_none() {
                eprintln!("error: no output directory; pass --out or set output_dir in the spec file");
                return Err(ExitCode::from(VALIDATION));
            }
            let workers = workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let outcome = run_experiment(&parsed, out.as_deref(), stride, workers)
                .context("experiment failed")
                .map_err(|e| {
                    eprintln!("error: {e:#}");
                    ExitCode::from(RUNTIME)
                })?;
            println!("{} runs written to {}", outcome.runs, outcome.output_dir.display());
            for row in &outcome.aggregate {
                println!(
                    "p={} k/d={} eps={} util={} subopt={:.6e} +- {:.3e}",
                    row.p, row.k_over_d, row.epsilon, row.util_rate, row.subopt_mean, row.subopt_std
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
