//! Command-line harness: loads an experiment config, dispatches one of the
//! batch commands, and reports where the outputs landed.
//!
//! Exit codes: 0 on success, 2 for configuration problems (unreadable file,
//! parse error, failed validation), 3 when a run aborted on a non-finite
//! state (a flagged report is still written), 1 for anything else.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iec_lab::config::ExperimentConfig;
use iec_lab::runner::{divergence_report, run_ablate, run_metrics, run_norms, run_sample};
use iec_lab::Error;

#[derive(Parser)]
#[command(
    name = "iec-lab",
    version,
    about = "Deterministic diffusion-sampling laboratory: perturbation injection, iterative error correction, and error-propagation diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration file (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory, overriding the config's `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for the trajectory pool (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Base seed, overriding the config's `base_seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run paired clean/perturbed/corrected trajectories; writes
    /// report.json, errors.csv, and samples.csv.
    Sample,
    /// Tabulate per-step amplification and contraction norms over clean
    /// trajectories; writes norms.csv.
    Norms,
    /// Sweep the config's axis, one row of corrected-arm quality and cost
    /// per value; writes sweep.csv.
    Ablate,
    /// Measure final-sample quality only; writes report.json and
    /// samples.csv.
    Metrics,
}

const CONFIG_EXIT: u8 = 2;
const DIVERGENCE_EXIT: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let Some(path) = cli.config else {
        eprintln!("error: --config <PATH> is required");
        return Ok(ExitCode::from(CONFIG_EXIT));
    };
    let mut config = match ExperimentConfig::from_file(&path) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("error: config {}: {err}", path.display());
            return Ok(ExitCode::from(CONFIG_EXIT));
        }
    };
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        config.base_seed = seed;
    }

    let outcome = match cli.command {
        Command::Sample => run_sample(&config, cli.workers).map(|report| {
            let aggregate = report.aggregate.as_ref();
            format!(
                "sample: {} trajectories, mean final error {:.6e} perturbed vs {:.6e} corrected, overhead {:.1}%",
                report.trajectories.len(),
                aggregate.map_or(f64::NAN, |a| a.perturbed.mean_final_error),
                aggregate.map_or(f64::NAN, |a| a.corrected.mean_final_error),
                aggregate.map_or(f64::NAN, |a| a.overhead_pct),
            )
        }),
        Command::Norms => run_norms(&config, cli.workers).map(|table| {
            format!(
                "norms: {} steps x {} relaxation values over {} trajectories",
                table.n_steps(),
                table.lambdas.len(),
                table.n_trajectories,
            )
        }),
        Command::Ablate => run_ablate(&config, cli.workers).map(|rows| {
            let axis = rows.first().map_or("?", |r| r.axis.as_str());
            format!("ablate: {} rows along the {axis} axis", rows.len())
        }),
        Command::Metrics => run_metrics(&config, cli.workers).map(|report| {
            let frechet = report
                .aggregate
                .as_ref()
                .and_then(|a| {
                    Some((a.clean_frechet?, a.perturbed.frechet?, a.corrected.frechet?))
                })
                .map_or("n/a".to_string(), |(c, p, r)| {
                    format!("{c:.6e} clean / {p:.6e} perturbed / {r:.6e} corrected")
                });
            format!(
                "metrics: {} samples per arm, distance to reference {frechet}",
                report.trajectories.len(),
            )
        }),
    };

    match outcome {
        Ok(summary) => {
            println!("{summary}");
            println!("wrote {}", config.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(err @ Error::NonFinite { .. }) => {
            let report = divergence_report(&config, &err.to_string());
            fs::create_dir_all(&config.out_dir)?;
            fs::write(config.out_dir.join("report.json"), report.to_json()?)?;
            eprintln!(
                "error: {err}; flagged report written to {}",
                config.out_dir.join("report.json").display()
            );
            Ok(ExitCode::from(DIVERGENCE_EXIT))
        }
        Err(err @ Error::InvalidConfig(_)) => {
            eprintln!("error: {err}");
            Ok(ExitCode::from(CONFIG_EXIT))
        }
        Err(err) => Err(err.into()),
    }
}
