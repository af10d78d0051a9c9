//! Batch execution: runs the paired clean/perturbed/corrected arms over a
//! seed range, aggregates diagnostics, and writes the report files.
//!
//! Every trajectory is an independent unit of work, so batches parallelize
//! across a worker pool; results are merged in seed order regardless of
//! completion order, which keeps every output byte-reproducible. The three
//! arms of one seed share the prior draw, so their final-state differences
//! measure exactly the injected corruption and its correction.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::analysis::{
    amplification_from_jacobian, contraction_from_jacobian, error_curve, ErrorReport,
};
use crate::config::{ExperimentConfig, Model, SweepAxis};
use crate::error::{Error, Result};
use crate::metrics::{frechet_distance, SampleSet};
use crate::models::EpsModel;
use crate::perturb::{PerturbationConfig, PerturbationKind};
use crate::report::{
    write_samples_csv, write_sweep_csv, Aggregate, ArmStats, NormsTable, RunReport, SweepRow,
    TrajectorySummary,
};
use crate::sampler::{sample_trajectory, IecConfig, IecPolicy, Trajectory};
use crate::schedule::NoiseSchedule;

/// Mixed into `base_seed` to key the reference-population draw, so it never
/// collides with a trajectory seed.
pub const REFERENCE_SEED_SALT: u64 = 0xC0FF_EE00_0D15_C0DE;

fn timestamp_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

// Runs `work` on the global pool, or on a dedicated pool of the requested
// size when the caller pins the worker count.
fn with_pool<T: Send>(workers: Option<usize>, work: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(work()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
            Ok(pool.install(work))
        }
    }
}

fn seeds_of(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.n_trajectories as u64)
        .map(|i| config.base_seed.wrapping_add(i))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

// Fréchet distance when both populations can fit a covariance, else None.
fn maybe_frechet(set: &SampleSet, reference: &SampleSet) -> Result<Option<f64>> {
    if set.len() > set.dim() && reference.len() > reference.dim() {
        Ok(Some(frechet_distance(set, reference)?))
    } else {
        Ok(None)
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), bytes)?;
    Ok(())
}

/// Minimal flagged report for a run that aborted on a non-finite state.
pub fn divergence_report(config: &ExperimentConfig, detail: &str) -> RunReport {
    RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_unix: timestamp_unix(),
        config: config.clone(),
        divergence: Some(detail.to_string()),
        trajectories: Vec::new(),
        aggregate: None,
        perturbed_errors: None,
        corrected_errors: None,
    }
}

// The three paired arms of one seed.
struct SeedArms {
    clean: Trajectory,
    perturbed: Trajectory,
    corrected: Trajectory,
}

fn run_arms(
    model: &Model,
    schedule: &Arc<NoiseSchedule>,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<SeedArms> {
    let no_pert = PerturbationConfig::none();
    let no_iec = IecConfig::none();
    Ok(SeedArms {
        clean: sample_trajectory(model, schedule, &no_pert, &no_iec, seed)?,
        perturbed: sample_trajectory(model, schedule, &config.perturbation, &no_iec, seed)?,
        corrected: sample_trajectory(model, schedule, &config.perturbation, &config.iec, seed)?,
    })
}

// Final states, final errors, and eval counts of every seed, in seed order.
struct ArmFinals {
    seeds: Vec<u64>,
    clean: Vec<DVector<f64>>,
    perturbed: Vec<DVector<f64>>,
    corrected: Vec<DVector<f64>>,
    perturbed_errors: Vec<f64>,
    corrected_errors: Vec<f64>,
    clean_evals: Vec<u64>,
    perturbed_evals: Vec<u64>,
    corrected_evals: Vec<u64>,
}

impl ArmFinals {
    fn from_rows(seeds: Vec<u64>, rows: Vec<SeedArms>) -> Self {
        let mut out = ArmFinals {
            seeds,
            clean: Vec::with_capacity(rows.len()),
            perturbed: Vec::with_capacity(rows.len()),
            corrected: Vec::with_capacity(rows.len()),
            perturbed_errors: Vec::with_capacity(rows.len()),
            corrected_errors: Vec::with_capacity(rows.len()),
            clean_evals: Vec::with_capacity(rows.len()),
            perturbed_evals: Vec::with_capacity(rows.len()),
            corrected_evals: Vec::with_capacity(rows.len()),
        };
        for arms in rows {
            out.perturbed_errors
                .push((arms.perturbed.final_state() - arms.clean.final_state()).norm());
            out.corrected_errors
                .push((arms.corrected.final_state() - arms.clean.final_state()).norm());
            out.clean_evals.push(arms.clean.full_eval_count);
            out.perturbed_evals.push(arms.perturbed.full_eval_count);
            out.corrected_evals.push(arms.corrected.full_eval_count);
            out.clean.push(arms.clean.final_state().clone());
            out.perturbed.push(arms.perturbed.final_state().clone());
            out.corrected.push(arms.corrected.final_state().clone());
        }
        out
    }

    fn summaries(&self) -> Vec<TrajectorySummary> {
        (0..self.seeds.len())
            .map(|i| TrajectorySummary {
                seed: self.seeds[i],
                perturbed_final_error: self.perturbed_errors[i],
                corrected_final_error: self.corrected_errors[i],
                clean_eval_count: self.clean_evals[i],
                perturbed_eval_count: self.perturbed_evals[i],
                corrected_eval_count: self.corrected_evals[i],
            })
            .collect()
    }

    fn overhead_pct(&self) -> f64 {
        let baseline = mean(&to_f64(&self.perturbed_evals));
        let corrected = mean(&to_f64(&self.corrected_evals));
        (corrected / baseline - 1.0) * 100.0
    }

    fn aggregate(&self, model: &Model, config: &ExperimentConfig) -> Result<Aggregate> {
        let reference =
            model.reference_set(config.n_reference, config.base_seed ^ REFERENCE_SEED_SALT)?;
        let set = |points: &[DVector<f64>], tag: &str| {
            SampleSet::new(points.to_vec(), format!("{tag}:{}", model.id()))
        };
        let clean_set = set(&self.clean, "clean")?;
        let perturbed_set = set(&self.perturbed, "perturbed")?;
        let corrected_set = set(&self.corrected, "corrected")?;
        Ok(Aggregate {
            clean_mean_eval_count: mean(&to_f64(&self.clean_evals)),
            clean_frechet: maybe_frechet(&clean_set, &reference)?,
            perturbed: ArmStats {
                mean_final_error: mean(&self.perturbed_errors),
                std_final_error: sample_std(&self.perturbed_errors),
                mean_eval_count: mean(&to_f64(&self.perturbed_evals)),
                frechet: maybe_frechet(&perturbed_set, &reference)?,
            },
            corrected: ArmStats {
                mean_final_error: mean(&self.corrected_errors),
                std_final_error: sample_std(&self.corrected_errors),
                mean_eval_count: mean(&to_f64(&self.corrected_evals)),
                frechet: maybe_frechet(&corrected_set, &reference)?,
            },
            overhead_pct: self.overhead_pct(),
        })
    }

    // samples.csv rows: all seeds of each arm, arms in a fixed order.
    fn write_samples(&self, dim: usize, buf: &mut Vec<u8>) -> Result<()> {
        let arms = [
            ("clean", &self.clean),
            ("perturbed", &self.perturbed),
            ("corrected", &self.corrected),
        ];
        let rows = arms.iter().flat_map(|(name, points)| {
            self.seeds
                .iter()
                .zip(points.iter())
                .map(move |(&seed, p)| (*name, seed, p))
        });
        write_samples_csv(dim, rows, buf)
    }
}

fn to_f64(xs: &[u64]) -> Vec<f64> {
    xs.iter().map(|&x| x as f64).collect()
}

/// Runs the full three-arm experiment: per-seed trajectories, mean
/// diagnostic curves of both corrupted arms, aggregate statistics, and the
/// output files `report.json`, `errors.csv` (perturbed-arm mean curves),
/// and `samples.csv` in the config's output directory.
pub fn run_sample(config: &ExperimentConfig, workers: Option<usize>) -> Result<RunReport> {
    config.validate()?;
    let (schedule, model) = config.build()?;
    let seeds = seeds_of(config);

    let rows: Vec<(SeedArms, ErrorReport, ErrorReport)> = with_pool(workers, || {
        seeds
            .par_iter()
            .map(|&seed| {
                let arms = run_arms(&model, &schedule, config, seed)?;
                let perturbed_curve = error_curve(&model, &arms.clean, &arms.perturbed)?;
                let corrected_curve = error_curve(&model, &arms.clean, &arms.corrected)?;
                Ok((arms, perturbed_curve, corrected_curve))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut arms = Vec::with_capacity(rows.len());
    let mut perturbed_curves = Vec::with_capacity(rows.len());
    let mut corrected_curves = Vec::with_capacity(rows.len());
    for (a, p, c) in rows {
        arms.push(a);
        perturbed_curves.push(p);
        corrected_curves.push(c);
    }
    let finals = ArmFinals::from_rows(seeds, arms);
    let perturbed_errors = ErrorReport::mean_of(&perturbed_curves)?;
    let corrected_errors = ErrorReport::mean_of(&corrected_curves)?;

    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_unix: timestamp_unix(),
        config: config.clone(),
        divergence: None,
        trajectories: finals.summaries(),
        aggregate: Some(finals.aggregate(&model, config)?),
        perturbed_errors: Some(perturbed_errors),
        corrected_errors: Some(corrected_errors),
    };

    let mut errors_csv = Vec::new();
    report
        .perturbed_errors
        .as_ref()
        .expect("curves were just attached")
        .write_csv(&mut errors_csv)?;
    let mut samples_csv = Vec::new();
    finals.write_samples(model.dim(), &mut samples_csv)?;

    write_file(&config.out_dir, "report.json", report.to_json()?.as_bytes())?;
    write_file(&config.out_dir, "errors.csv", &errors_csv)?;
    write_file(&config.out_dir, "samples.csv", &samples_csv)?;
    Ok(report)
}

/// Computes per-step amplification and contraction norms averaged over
/// clean trajectories, one contraction column per `lambda_grid` entry, and
/// writes `norms.csv`.
pub fn run_norms(config: &ExperimentConfig, workers: Option<usize>) -> Result<NormsTable> {
    config.validate()?;
    let (schedule, model) = config.build()?;
    let seeds = seeds_of(config);
    let t_sample = schedule.t_sample();
    let lambdas = config.lambda_grid.clone();
    let no_pert = PerturbationConfig::none();
    let no_iec = IecConfig::none();

    type SeedNorms = (Vec<f64>, Vec<Vec<f64>>);
    let per_seed: Vec<SeedNorms> = with_pool(workers, || {
        seeds
            .par_iter()
            .map(|&seed| {
                let clean = sample_trajectory(&model, &schedule, &no_pert, &no_iec, seed)?;
                let mut amplification = Vec::with_capacity(t_sample);
                let mut contraction = vec![Vec::with_capacity(t_sample); lambdas.len()];
                for step in 0..t_sample {
                    let coeffs = schedule.step_coeffs(step)?;
                    let j_src = model.jacobian(&clean.states[step], coeffs.t_index)?;
                    amplification.push(amplification_from_jacobian(&coeffs, &j_src));
                    let j_tgt = model.jacobian(&clean.states[step + 1], coeffs.t_index)?;
                    for (i, &lambda) in lambdas.iter().enumerate() {
                        contraction[i].push(contraction_from_jacobian(&coeffs, lambda, &j_tgt)?);
                    }
                }
                Ok((amplification, contraction))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let n = per_seed.len() as f64;
    let mean_over_seeds = |pick: &dyn Fn(&SeedNorms, usize) -> f64| -> Vec<f64> {
        (0..t_sample)
            .map(|s| per_seed.iter().map(|row| pick(row, s)).sum::<f64>() / n)
            .collect()
    };
    let amplification = mean_over_seeds(&|row, s| row.0[s]);
    let contraction: Vec<Vec<f64>> = (0..lambdas.len())
        .map(|i| mean_over_seeds(&|row, s| row.1[i][s]))
        .collect();
    let t_indices = (0..t_sample)
        .map(|s| Ok(schedule.step_coeffs(s)?.t_index))
        .collect::<Result<Vec<_>>>()?;

    let table = NormsTable {
        t_indices,
        amplification,
        lambdas,
        contraction,
        n_trajectories: per_seed.len(),
    };
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write_file(&config.out_dir, "norms.csv", &csv)?;
    Ok(table)
}

// Expands the sweep axis into concrete config variants with row labels.
fn axis_variants(config: &ExperimentConfig, axis: &SweepAxis) -> (String, Vec<(ExperimentConfig, String)>) {
    fn policy_label(policy: &IecPolicy) -> String {
        match policy {
            IecPolicy::All => "all".into(),
            IecPolicy::None => "none".into(),
            IecPolicy::FirstLast(f) => format!("first_last_{f}"),
            IecPolicy::Explicit(steps) => format!("explicit_{}", steps.len()),
        }
    }
    let mut variants = Vec::new();
    let name = match axis {
        SweepAxis::Lambda(values) => {
            for &v in values {
                let mut c = config.clone();
                c.iec.lambda = v;
                variants.push((c, format!("{v}")));
            }
            "lambda"
        }
        SweepAxis::MaxIters(values) => {
            for &v in values {
                let mut c = config.clone();
                c.iec.max_iters = v;
                variants.push((c, format!("{v}")));
            }
            "k"
        }
        SweepAxis::Policy(values) => {
            for v in values {
                let mut c = config.clone();
                c.iec.policy = v.clone();
                variants.push((c, policy_label(v)));
            }
            "policy"
        }
        SweepAxis::CacheInterval(values) => {
            for &v in values {
                let mut c = config.clone();
                c.perturbation.kind = PerturbationKind::Cache;
                c.perturbation.interval_n = v;
                variants.push((c, format!("{v}")));
            }
            "cache_n"
        }
        SweepAxis::Bits(values) => {
            for &v in values {
                let mut c = config.clone();
                c.perturbation.kind = PerturbationKind::Quantize;
                c.perturbation.bits = v;
                variants.push((c, format!("{v}")));
            }
            "bits"
        }
        SweepAxis::Sigma(values) => {
            for &v in values {
                let mut c = config.clone();
                c.perturbation.kind = PerturbationKind::Additive;
                c.perturbation.sigma = v;
                variants.push((c, format!("{v}")));
            }
            "sigma"
        }
        SweepAxis::SampleSteps(values) => {
            for &v in values {
                let mut c = config.clone();
                c.t_sample = v;
                variants.push((c, format!("{v}")));
            }
            "t"
        }
    };
    (name.to_string(), variants)
}

/// Sweeps the configured axis: each value runs the three arms over the
/// whole seed range and contributes one row of corrected-arm quality and
/// cost. Writes `sweep.csv`.
pub fn run_ablate(config: &ExperimentConfig, workers: Option<usize>) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let axis = config
        .sweep
        .clone()
        .ok_or_else(|| Error::InvalidConfig("the ablate command needs a sweep axis".into()))?;
    let (_, base_model) = config.build()?;
    let reference =
        base_model.reference_set(config.n_reference, config.base_seed ^ REFERENCE_SEED_SALT)?;
    let (axis_name, variants) = axis_variants(config, &axis);

    let rows = with_pool(workers, || -> Result<Vec<SweepRow>> {
        variants
            .iter()
            .map(|(variant, label)| {
                variant.validate()?;
                let (schedule, model) = variant.build()?;
                let seeds = seeds_of(variant);
                let arm_rows = seeds
                    .par_iter()
                    .map(|&seed| run_arms(&model, &schedule, variant, seed))
                    .collect::<Result<Vec<_>>>()?;
                let finals = ArmFinals::from_rows(seeds, arm_rows);
                let corrected_set = SampleSet::new(
                    finals.corrected.clone(),
                    format!("corrected:{}", model.id()),
                )?;
                Ok(SweepRow {
                    axis: axis_name.clone(),
                    value: label.clone(),
                    mean_final_error: mean(&finals.corrected_errors),
                    frechet: maybe_frechet(&corrected_set, &reference)?,
                    overhead_pct: finals.overhead_pct(),
                })
            })
            .collect()
    })??;

    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv)?;
    write_file(&config.out_dir, "sweep.csv", &csv)?;
    Ok(rows)
}

/// Runs the three arms for sample-quality measurement only (no diagnostic
/// curves): aggregates final errors, eval counts, and Fréchet distances,
/// and writes `report.json` plus `samples.csv`.
pub fn run_metrics(config: &ExperimentConfig, workers: Option<usize>) -> Result<RunReport> {
    config.validate()?;
    let (schedule, model) = config.build()?;
    let seeds = seeds_of(config);

    let arm_rows: Vec<SeedArms> = with_pool(workers, || {
        seeds
            .par_iter()
            .map(|&seed| run_arms(&model, &schedule, config, seed))
            .collect::<Result<Vec<_>>>()
    })??;
    let finals = ArmFinals::from_rows(seeds, arm_rows);

    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_unix: timestamp_unix(),
        config: config.clone(),
        divergence: None,
        trajectories: finals.summaries(),
        aggregate: Some(finals.aggregate(&model, config)?),
        perturbed_errors: None,
        corrected_errors: None,
    };

    let mut samples_csv = Vec::new();
    finals.write_samples(model.dim(), &mut samples_csv)?;
    write_file(&config.out_dir, "report.json", report.to_json()?.as_bytes())?;
    write_file(&config.out_dir, "samples.csv", &samples_csv)?;
    Ok(report)
}
