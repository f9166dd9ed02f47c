//! `hyql`: run, summarize and verify benchmark experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hyql_core::experiment::{self, ExperimentError, ExperimentSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_MISMATCH: u8 = 3;

#[derive(Parser)]
#[command(name = "hyql", version, about = "Context-aware hybrid Q-learning benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec and write metrics, traces and stores.
    Run {
        spec: PathBuf,
        /// Override the number of seeds.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (defaults to the number of CPUs).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Summarize metrics.csv of a run directory.
    Report { dir: PathBuf },
    /// Recompute metrics from the persisted traces and diff against metrics.csv.
    Verify { dir: PathBuf },
}

fn exit_for(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<ExperimentError>() {
        Some(e) if e.is_config() => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::FAILURE,
    }
}

fn run(
    spec: PathBuf,
    trials: Option<usize>,
    out: Option<PathBuf>,
    parallel: Option<usize>,
) -> anyhow::Result<()> {
    let mut spec = ExperimentSpec::load(&spec)?;
    if let Some(t) = trials {
        spec.trials = t;
    }
    if let Some(dir) = out {
        spec.output_dir = dir;
    }
    let parallel = parallel.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    experiment::run_experiment(&spec, parallel)?;
    let dir = &spec.output_dir;
    print!("{}", experiment::report(dir)?);
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            spec,
            trials,
            out,
            parallel,
        } => run(spec, trials, out, parallel),
        Command::Report { dir } => experiment::report(&dir)
            .map(|text| print!("{text}"))
            .with_context(|| format!("cannot report on {}", dir.display())),
        Command::Verify { dir } => match experiment::verify(&dir) {
            Ok(mismatches) if mismatches.is_empty() => {
                println!("ok: every metric matches its recomputation");
                Ok(())
            }
            Ok(mismatches) => {
                for m in &mismatches {
                    eprintln!("mismatch: {m}");
                }
                eprintln!("{} mismatching metric rows", mismatches.len());
                return ExitCode::from(EXIT_MISMATCH);
            }
            Err(e) => Err(anyhow::Error::new(e)
                .context(format!("cannot verify {}", dir.display()))),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_for(&e)
        }
    }
}
