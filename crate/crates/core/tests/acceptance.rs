//! End-to-end checks of the laboratory's headline guarantees, one test per
//! guarantee. Every test prints a single `[PASS]`/`[FAIL]` line with its
//! measured quantities; run with `-- --nocapture` to see the lines for
//! passing tests too (failures always show them).

use std::fs;
use std::sync::Arc;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rayon::prelude::*;
use tempfile::TempDir;

use iec_lab::analysis::{contraction_constant, contraction_from_jacobian, error_curve};
use iec_lab::config::{ExperimentConfig, SweepAxis};
use iec_lab::metrics::{frechet_distance, reference_samples, SampleSet};
use iec_lab::models::{EpsModel, GaussianMixtureModel, LinearGaussianModel};
use iec_lab::perturb::PerturbationConfig;
use iec_lab::runner::{run_ablate, run_metrics, run_norms, run_sample};
use iec_lab::sampler::{
    ddim_step, draw_prior, iec_refine, sample_trajectory, IecConfig, IecPolicy, Trajectory,
};
use iec_lab::schedule::NoiseSchedule;
use iec_lab::Result;

/// Prints the verdict line and passes the flag through to the assertion.
fn verdict(pass: bool, label: &str, detail: &str) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {label}: {detail}");
    pass
}

fn default_grid(t_sample: usize) -> Arc<NoiseSchedule> {
    Arc::new(
        NoiseSchedule::linear(1000, 1e-4, 0.02)
            .unwrap()
            .select_timesteps(t_sample)
            .unwrap(),
    )
}

fn clean_arm(model: &dyn EpsModel, schedule: &NoiseSchedule, seed: u64) -> Result<Trajectory> {
    sample_trajectory(
        model,
        schedule,
        &PerturbationConfig::none(),
        &IecConfig::none(),
        seed,
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn every_transition_amplifies_state_and_flips_noise() {
    let mut min_a = f64::INFINITY;
    let mut max_b = f64::NEG_INFINITY;
    for t_sample in [25usize, 100] {
        let schedule = default_grid(t_sample);
        for step in 0..t_sample {
            let c = schedule.step_coeffs(step).unwrap();
            min_a = min_a.min(c.a);
            max_b = max_b.max(c.b);
        }
    }
    let pass = min_a > 1.0 && max_b < 0.0;
    let detail =
        format!("min A = {min_a:.6} (need > 1), max B = {max_b:.6} (need < 0) over T in {{25, 100}}");
    assert!(verdict(pass, "transition coefficient signs", &detail), "{detail}");
}

#[test]
fn linear_model_error_recursion_is_exact() {
    let schedule = default_grid(25);
    let cases: Vec<LinearGaussianModel> = vec![
        LinearGaussianModel::new(dvector![0.3], dmatrix![0.8], schedule.clone()).unwrap(),
        LinearGaussianModel::new(
            dvector![0.5, -0.2],
            dmatrix![1.0, 0.2; 0.2, 0.5],
            schedule.clone(),
        )
        .unwrap(),
        LinearGaussianModel::new(
            DVector::from_fn(5, |i, _| 0.1 * i as f64),
            DMatrix::from_diagonal(&DVector::from_fn(5, |i, _| 0.5 + 0.25 * i as f64)),
            schedule.clone(),
        )
        .unwrap(),
    ];

    let mut worst_rel: f64 = 0.0;
    for model in &cases {
        for seed in [11u64, 202] {
            let clean = clean_arm(model, &schedule, seed).unwrap();
            let perturbed = sample_trajectory(
                model,
                &schedule,
                &PerturbationConfig::additive(1e-3),
                &IecConfig::none(),
                seed,
            )
            .unwrap();
            let curve = error_curve(model, &clean, &perturbed).unwrap();
            for s in 0..curve.n_steps() {
                let rel =
                    (curve.predicted_delta_norm[s] - curve.delta_norm[s]).abs() / curve.delta_norm[s];
                worst_rel = worst_rel.max(rel);
            }
        }
    }
    let pass = worst_rel <= 1e-8;
    let detail = format!(
        "max relative gap between the first-order recursion and measured deviations: {worst_rel:.3e} (tolerance 1e-8, d in {{1, 2, 5}}, every step including the final state)"
    );
    assert!(verdict(pass, "linear-model error recursion", &detail), "{detail}");
}

#[test]
fn relaxed_refinement_converges_to_the_closed_form_fixed_point() {
    let schedule = default_grid(25);
    let model = LinearGaussianModel::new(
        dvector![0.4, -0.3],
        dmatrix![1.0, 0.3; 0.3, 0.7],
        schedule.clone(),
    )
    .unwrap();
    let tau = 1e-10;
    let identity = DMatrix::<f64>::identity(2, 2);

    let mut worst_gap: f64 = 0.0;
    let mut worst_ratio_excess = f64::NEG_INFINITY;
    for (step, seed) in [(0usize, 5u64), (12, 6), (24, 7)] {
        let coeffs = schedule.step_coeffs(step).unwrap();
        let x_t = draw_prior(seed, 2);
        let mut eval = |x: &DVector<f64>, t: usize| model.eps(x, t);
        let x_init = ddim_step(&x_t, &model.eps(&x_t, coeffs.t_index).unwrap(), &coeffs).unwrap();

        // Closed form: the refinement's fixed point solves
        // (I - B·M)·x = A·x_t + B·b for the model's affine map M·x + b.
        let (m, b) = model.linear_coeffs(coeffs.t_index).unwrap();
        let x_star = (&identity - &m * coeffs.b)
            .lu()
            .solve(&(&x_t * coeffs.a + &b * coeffs.b))
            .unwrap();

        let cfg = IecConfig {
            lambda: 0.5,
            max_iters: 100,
            threshold: tau,
            ..IecConfig::default()
        };
        let out = iec_refine(&x_t, &x_init, &coeffs, coeffs.t_index, &cfg, &mut eval).unwrap();
        assert!(!out.aborted, "refinement must not trip the divergence guard");
        worst_gap = worst_gap.max((&out.x - &x_star).norm() / (1.0 + x_star.norm()));

        // Replay with growing budgets and a dead threshold to expose the
        // iterate sequence, then check the per-iteration contraction rate.
        let l = contraction_constant(&model, &x_star, &coeffs, 0.5).unwrap();
        let mut errors = vec![(&x_init - &x_star).norm()];
        for k in 1..=40u32 {
            let cfg_k = IecConfig {
                lambda: 0.5,
                max_iters: k,
                threshold: 1e-300,
                ..IecConfig::default()
            };
            let out_k =
                iec_refine(&x_t, &x_init, &coeffs, coeffs.t_index, &cfg_k, &mut eval).unwrap();
            errors.push((&out_k.x - &x_star).norm());
        }
        for pair in errors.windows(2) {
            // Ratios turn into roundoff noise once the error reaches
            // machine scale relative to the fixed point.
            if pair[0] > 1e-12 * (1.0 + x_star.norm()) {
                worst_ratio_excess = worst_ratio_excess.max(pair[1] / pair[0] - l);
            }
        }
    }
    let pass = worst_gap <= tau && worst_ratio_excess <= 1e-6;
    let detail = format!(
        "final gap {worst_gap:.3e} (tolerance {tau:.0e} of 1+|x*|), per-iteration ratio exceeds the contraction constant by at most {worst_ratio_excess:.3e} (tolerance 1e-6)"
    );
    assert!(verdict(pass, "fixed-point refinement", &detail), "{detail}");
}

#[test]
fn relaxation_window_contracts_at_every_visited_state() {
    let t_sample = 100usize;
    let schedule = default_grid(t_sample);
    let model = GaussianMixtureModel::default_mixture(schedule.clone()).unwrap();
    let lambdas = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

    let per_seed: Vec<f64> = (0..100u64)
        .into_par_iter()
        .map(|seed| -> Result<f64> {
            let clean = clean_arm(&model, &schedule, seed)?;
            let mut worst: f64 = 0.0;
            for step in 0..t_sample {
                let coeffs = schedule.step_coeffs(step)?;
                for x in [&clean.states[step], &clean.states[step + 1]] {
                    let j = model.jacobian(x, coeffs.t_index)?;
                    for &lambda in &lambdas {
                        worst = worst.max(contraction_from_jacobian(&coeffs, lambda, &j)?);
                    }
                }
            }
            Ok(worst)
        })
        .collect::<Result<Vec<_>>>()
        .unwrap();
    let max_l = per_seed.iter().fold(0.0f64, |a, &b| a.max(b));

    let coeffs0 = schedule.step_coeffs(0).unwrap();
    let at_zero = contraction_constant(&model, &draw_prior(0, 2), &coeffs0, 0.0).unwrap();

    let pass = max_l < 1.0 && at_zero == 1.0;
    let detail = format!(
        "max L over 100 trajectories x 100 steps x lambda in [0.1, 0.7]: {max_l:.6} (need < 1); L at lambda = 0: {at_zero} (need exactly 1)"
    );
    assert!(verdict(pass, "contraction window", &detail), "{detail}");
}

#[test]
fn correction_flattens_the_error_growth_law() {
    let grid = [25usize, 50, 100, 200];
    let n_seeds = 256u64;
    let perturbation = PerturbationConfig::additive(1e-2);

    let mut mean_uncorrected = Vec::new();
    let mut mean_corrected = Vec::new();
    for &t_sample in &grid {
        let schedule = default_grid(t_sample);
        let model = GaussianMixtureModel::default_mixture(schedule.clone()).unwrap();
        let finals: Vec<(f64, f64)> = (1000..1000 + n_seeds)
            .into_par_iter()
            .map(|seed| -> Result<(f64, f64)> {
                let clean = clean_arm(&model, &schedule, seed)?;
                let uncorrected =
                    sample_trajectory(&model, &schedule, &perturbation, &IecConfig::none(), seed)?;
                let corrected =
                    sample_trajectory(&model, &schedule, &perturbation, &IecConfig::default(), seed)?;
                Ok((
                    (uncorrected.final_state() - clean.final_state()).norm(),
                    (corrected.final_state() - clean.final_state()).norm(),
                ))
            })
            .collect::<Result<Vec<_>>>()
            .unwrap();
        mean_uncorrected.push(mean(&finals.iter().map(|f| f.0).collect::<Vec<_>>()));
        mean_corrected.push(mean(&finals.iter().map(|f| f.1).collect::<Vec<_>>()));
    }

    // Least-squares slope of log mean error against log step count.
    let slope = |errors: &[f64]| {
        let xs: Vec<f64> = grid.iter().map(|&t| (t as f64).ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let (mx, my) = (mean(&xs), mean(&ys));
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        cov / var
    };
    let slope_uncorrected = slope(&mean_uncorrected);
    let slope_corrected = slope(&mean_corrected);
    let gap = slope_uncorrected - slope_corrected;

    let pass = gap >= 0.3;
    let detail = format!(
        "growth exponent {slope_uncorrected:.3} uncorrected vs {slope_corrected:.3} corrected over T in {{25, 50, 100, 200}}, separation {gap:.3} (need >= 0.3, 256 seeds)"
    );
    assert!(verdict(pass, "error growth-law separation", &detail), "{detail}");
}

#[test]
fn correction_dominates_the_uncorrected_error_curve() {
    let dir = TempDir::new().unwrap();
    let config = ExperimentConfig {
        out_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let report = run_sample(&config, None).unwrap();

    let perturbed = report.perturbed_errors.unwrap();
    let corrected = report.corrected_errors.unwrap();
    let n = perturbed.n_steps();
    let wins = (0..n)
        .filter(|&s| corrected.delta_norm[s] <= perturbed.delta_norm[s])
        .count();
    let fraction = wins as f64 / n as f64;

    let pass = fraction >= 0.9;
    let detail = format!(
        "corrected mean per-step error is below the uncorrected curve at {wins}/{n} steps ({:.0}%, need >= 90%) under default settings",
        fraction * 100.0
    );
    assert!(verdict(pass, "error-curve dominance", &detail), "{detail}");
}

#[test]
fn first_last_budgets_cost_exactly_their_step_share() {
    let schedule = default_grid(100);
    let model = GaussianMixtureModel::default_mixture(schedule.clone()).unwrap();
    let perturbation = PerturbationConfig::quantize(8);
    let cases = [
        (IecPolicy::All, 100u64),
        (IecPolicy::FirstLast(0.25), 50),
        (IecPolicy::FirstLast(0.125), 25),
        (IecPolicy::FirstLast(0.1), 20),
        (IecPolicy::FirstLast(0.05), 10),
    ];

    let mut measured = Vec::new();
    let mut pass = true;
    for (policy, expected_extra) in &cases {
        let baseline =
            sample_trajectory(&model, &schedule, &perturbation, &IecConfig::none(), 3).unwrap();
        let corrected = sample_trajectory(
            &model,
            &schedule,
            &perturbation,
            &IecConfig {
                policy: policy.clone(),
                ..IecConfig::default()
            },
            3,
        )
        .unwrap();
        let extra = corrected.full_eval_count - baseline.full_eval_count;
        measured.push(extra);
        pass &= baseline.full_eval_count == 100 && extra == *expected_extra;
    }

    let detail = format!(
        "extra evaluations at T = 100 for policies all, +-1/4, +-1/8, +-1/10, +-1/20: measured {measured:?}, required [100, 50, 25, 20, 10] (100%, 50%, 25%, 20%, 10% overhead)"
    );
    assert!(verdict(pass, "correction overhead exactness", &detail), "{detail}");
}

#[test]
fn frechet_ordering_across_perturbation_grades() {
    let t_sample = 100usize;
    let n = 4096usize;
    let schedule = default_grid(t_sample);
    let model = GaussianMixtureModel::default_mixture(schedule.clone()).unwrap();
    let reference = reference_samples(&model, n, 0xD1CE).unwrap();

    let clean_finals: Vec<DVector<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|seed| Ok(clean_arm(&model, &schedule, seed)?.final_state().clone()))
        .collect::<Result<Vec<_>>>()
        .unwrap();
    let clean_set = SampleSet::new(clean_finals, "clean").unwrap();
    let d_clean = frechet_distance(&clean_set, &reference).unwrap();

    let settings = [
        ("additive sigma=0.05", PerturbationConfig::additive(0.05)),
        ("additive sigma=0.10", PerturbationConfig::additive(0.1)),
        ("quantize bits=4", PerturbationConfig::quantize(4)),
        ("quantize bits=8", PerturbationConfig::quantize(8)),
    ];
    let mut pass = true;
    let mut rows = Vec::new();
    for (label, perturbation) in &settings {
        let finals: Vec<(DVector<f64>, DVector<f64>)> = (0..n as u64)
            .into_par_iter()
            .map(|seed| -> Result<(DVector<f64>, DVector<f64>)> {
                let perturbed =
                    sample_trajectory(&model, &schedule, perturbation, &IecConfig::none(), seed)?;
                let corrected =
                    sample_trajectory(&model, &schedule, perturbation, &IecConfig::default(), seed)?;
                Ok((
                    perturbed.final_state().clone(),
                    corrected.final_state().clone(),
                ))
            })
            .collect::<Result<Vec<_>>>()
            .unwrap();
        let (perturbed_finals, corrected_finals): (Vec<_>, Vec<_>) = finals.into_iter().unzip();
        let d_perturbed = frechet_distance(
            &SampleSet::new(perturbed_finals, "perturbed").unwrap(),
            &reference,
        )
        .unwrap();
        let d_corrected = frechet_distance(
            &SampleSet::new(corrected_finals, "corrected").unwrap(),
            &reference,
        )
        .unwrap();
        pass &= d_clean <= d_corrected && d_corrected <= d_perturbed;
        rows.push(format!(
            "{label}: corrected {d_corrected:.5} vs perturbed {d_perturbed:.5}"
        ));
    }

    let detail = format!(
        "need clean <= corrected <= perturbed at 4096 samples; clean {d_clean:.5}; {}",
        rows.join("; ")
    );
    assert!(verdict(pass, "sample-quality ordering", &detail), "{detail}");
}

#[test]
fn reruns_reproduce_identical_csv_bytes() {
    let mut config = ExperimentConfig::default();
    config.schedule.t_train = 100;
    config.t_sample = 20;
    config.n_trajectories = 6;
    config.n_reference = 32;
    config.lambda_grid = vec![0.0, 0.5];
    config.sweep = Some(SweepAxis::Sigma(vec![0.05, 0.1]));

    let mut mismatches = Vec::new();
    let mut compared = 0usize;
    type Command = fn(&ExperimentConfig, Option<usize>) -> Result<()>;
    let commands: [(&str, Command, &[&str]); 4] = [
        (
            "sample",
            |c, w| run_sample(c, w).map(|_| ()),
            &["errors.csv", "samples.csv"],
        ),
        ("norms", |c, w| run_norms(c, w).map(|_| ()), &["norms.csv"]),
        ("ablate", |c, w| run_ablate(c, w).map(|_| ()), &["sweep.csv"]),
        (
            "metrics",
            |c, w| run_metrics(c, w).map(|_| ()),
            &["samples.csv"],
        ),
    ];
    for (name, command, files) in commands {
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        let mut config_a = config.clone();
        config_a.out_dir = dir_a.path().to_path_buf();
        let mut config_b = config.clone();
        config_b.out_dir = dir_b.path().to_path_buf();
        command(&config_a, Some(4)).unwrap();
        command(&config_b, Some(1)).unwrap();
        for file in files {
            compared += 1;
            let a = fs::read(dir_a.path().join(file)).unwrap();
            let b = fs::read(dir_b.path().join(file)).unwrap();
            if a != b {
                mismatches.push(format!("{name}/{file}"));
            }
        }
    }

    let pass = mismatches.is_empty();
    let detail = format!(
        "{compared} CSV bodies byte-identical across re-runs of all four commands (worker counts 4 vs 1); mismatches: {mismatches:?}"
    );
    assert!(verdict(pass, "re-run determinism", &detail), "{detail}");
}
