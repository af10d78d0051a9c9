//! Diagnostics that explain and predict sampling error growth.
//!
//! The deterministic transition `x_prev = a·x + b·ε(x, t)` linearizes, around
//! a clean state, to the error map `δ_prev = (a·I + b·J)·δ + b·ε_delta`,
//! where `J` is the model Jacobian and `ε_delta` the injected prediction
//! error of the step. This module computes the spectral norms that govern
//! that map (the per-step amplification `‖a·I + b·J‖` and the relaxed
//! fixed-point contraction constant `‖(1−λ)·I + λ·b·J‖`), runs the
//! linearized recursion forward to predict measured deviations, and
//! evaluates the geometric-series bound on the corrected error. Everything
//! is exact for linear-Gaussian models, which is what the test oracles
//! exploit; for other models the quantities are first-order estimates at
//! clean-trajectory states.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::EpsModel;
use crate::sampler::Trajectory;
use crate::schedule::StepCoefficients;

/// Default iteration budget of the power iteration.
pub const SPECTRAL_MAX_ITERS: usize = 100;
/// Default relative tolerance on successive spectral-norm estimates.
pub const SPECTRAL_TOL: f64 = 1e-8;

// Fixed seed of the power iteration's starting vector; any value works, it
// only has to be reproducible.
const POWER_START_SEED: u64 = 17;

/// Spectral-norm estimate with its convergence status.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    /// False when the iteration budget ran out before two successive
    /// estimates agreed to tolerance; `value` is then the last estimate.
    pub converged: bool,
    pub iters: usize,
}

/// Largest singular value of a linear map given matrix-free matvecs with
/// the map and its adjoint.
///
/// Power iteration on `v ↦ Mᵀ(M·v)` from a seeded random start; the
/// estimate at each pass is `‖M·v̂‖` for the current unit vector `v̂`, and
/// iteration stops once successive estimates agree to `tol` relatively.
pub fn spectral_norm(
    matvec: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    adjoint_matvec: &mut dyn FnMut(&DVector<f64>) -> DVector<f64>,
    dim: usize,
    max_iters: usize,
    tol: f64,
) -> SpectralEstimate {
    assert!(dim >= 1, "spectral norm needs at least one dimension");
    assert!(max_iters >= 1, "at least one iteration is required");
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_START_SEED);
    let mut v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    v /= v.norm();

    let mut estimate = 0.0;
    for k in 0..max_iters {
        let image = matvec(&v);
        let new_estimate = image.norm();
        if new_estimate == 0.0 {
            // The map annihilates the current vector; for a generic start
            // this only happens for the zero map.
            return SpectralEstimate {
                value: 0.0,
                converged: true,
                iters: k + 1,
            };
        }
        let pulled_back = adjoint_matvec(&image);
        let close = k > 0 && (new_estimate - estimate).abs() <= tol * new_estimate;
        estimate = new_estimate;
        if close {
            return SpectralEstimate {
                value: estimate,
                converged: true,
                iters: k + 1,
            };
        }
        let norm = pulled_back.norm();
        if norm == 0.0 {
            // MᵀM·v = 0 while M·v ≠ 0 cannot happen for real matrices;
            // treat defensively as convergence of the current estimate.
            return SpectralEstimate {
                value: estimate,
                converged: true,
                iters: k + 1,
            };
        }
        v = pulled_back / norm;
    }
    SpectralEstimate {
        value: estimate,
        converged: false,
        iters: max_iters,
    }
}

/// Spectral norm of an explicit matrix via [`spectral_norm`] with the
/// transpose as the adjoint.
pub fn matrix_spectral_norm(m: &DMatrix<f64>) -> SpectralEstimate {
    let mt = m.transpose();
    spectral_norm(
        &mut |v| m * v,
        &mut |v| &mt * v,
        m.ncols(),
        SPECTRAL_MAX_ITERS,
        SPECTRAL_TOL,
    )
}

/// `‖a·I + b·J‖` for an explicit Jacobian.
pub fn amplification_from_jacobian(coeffs: &StepCoefficients, jacobian: &DMatrix<f64>) -> f64 {
    let d = jacobian.nrows();
    let m = DMatrix::identity(d, d) * coeffs.a + jacobian * coeffs.b;
    matrix_spectral_norm(&m).value
}

/// `‖(1−λ)·I + λ·b·J‖` for an explicit Jacobian. `lambda` may be 0, whose
/// analytic value is exactly 1 (the map degenerates to the identity).
pub fn contraction_from_jacobian(
    coeffs: &StepCoefficients,
    lambda: f64,
    jacobian: &DMatrix<f64>,
) -> Result<f64> {
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(1.0);
    }
    let d = jacobian.nrows();
    let m = DMatrix::identity(d, d) * (1.0 - lambda) + jacobian * (lambda * coeffs.b);
    Ok(matrix_spectral_norm(&m).value)
}

/// Per-step error amplification `‖a·I + b·J(x, t)‖` at a trajectory state.
pub fn step_amplification(
    model: &dyn EpsModel,
    x: &DVector<f64>,
    coeffs: &StepCoefficients,
) -> Result<f64> {
    let j = model.jacobian(x, coeffs.t_index)?;
    Ok(amplification_from_jacobian(coeffs, &j))
}

/// Contraction constant of the relaxed fixed-point map at a state:
/// `‖(1−λ)·I + λ·b·J(x, t)‖`. Values below 1 guarantee local convergence
/// of the per-step correction.
pub fn contraction_constant(
    model: &dyn EpsModel,
    x: &DVector<f64>,
    coeffs: &StepCoefficients,
    lambda: f64,
) -> Result<f64> {
    let j = model.jacobian(x, coeffs.t_index)?;
    contraction_from_jacobian(coeffs, lambda, &j)
}

/// One step of the linearized error recursion:
/// `(a·I + b·J(x, t))·δ + b·ε_delta`, with the Jacobian at the clean state.
pub fn predicted_error_step(
    delta: &DVector<f64>,
    eps_delta: &DVector<f64>,
    model: &dyn EpsModel,
    x_clean: &DVector<f64>,
    coeffs: &StepCoefficients,
) -> Result<DVector<f64>> {
    if delta.len() != x_clean.len() || eps_delta.len() != x_clean.len() {
        return Err(Error::DimensionMismatch {
            expected: x_clean.len(),
            found: delta.len().max(eps_delta.len()),
        });
    }
    let j = model.jacobian(x_clean, coeffs.t_index)?;
    Ok(delta * coeffs.a + (&j * delta) * coeffs.b + eps_delta * coeffs.b)
}

/// Runs the linearized recursion across a whole trajectory: starting from
/// `δ = 0` at the prior (paired arms share the seed), each step applies
/// [`predicted_error_step`] with the clean state and the realized injected
/// error, and the returned vector predicts the final-state deviation.
pub fn cumulative_error_prediction(
    model: &dyn EpsModel,
    clean: &Trajectory,
    eps_deltas: &[DVector<f64>],
) -> Result<DVector<f64>> {
    if eps_deltas.len() != clean.n_steps() {
        return Err(Error::Mismatch(format!(
            "{} injected-error records for {} steps",
            eps_deltas.len(),
            clean.n_steps()
        )));
    }
    let mut delta = DVector::zeros(clean.dim());
    for (step, eps_delta) in eps_deltas.iter().enumerate() {
        let coeffs = clean.schedule.step_coeffs(step)?;
        delta = predicted_error_step(&delta, eps_delta, model, &clean.states[step], &coeffs)?;
    }
    Ok(delta)
}

/// Per-step bounds `C/(1−L)` on the corrected error; steps with `L ≥ 1`
/// have no finite bound and report infinity.
pub fn iec_error_bound(c_terms: &[f64], l_terms: &[f64]) -> Result<Vec<f64>> {
    if c_terms.len() != l_terms.len() {
        return Err(Error::Mismatch(format!(
            "{} numerator terms vs {} contraction terms",
            c_terms.len(),
            l_terms.len()
        )));
    }
    Ok(c_terms
        .iter()
        .zip(l_terms)
        .map(|(&c, &l)| if l < 1.0 { c / (1.0 - l) } else { f64::INFINITY })
        .collect())
}

/// Per-step diagnostic curves comparing a trajectory against its clean
/// counterpart, plus the model-based predictions at the clean states.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ErrorReport {
    /// Measured deviation `‖other − clean‖` after each step.
    pub delta_norm: Vec<f64>,
    /// `‖a·I + b·J‖` at each step's clean source state.
    pub amplification: Vec<f64>,
    /// Contraction constant at each step's clean target state.
    pub contraction: Vec<f64>,
    /// Deviation norms predicted by the linearized recursion.
    pub predicted_delta_norm: Vec<f64>,
    /// Geometric-series bound on the corrected error per step.
    pub iec_bound: Vec<f64>,
    /// Training-grid timestep of each step's source state.
    pub t_indices: Vec<usize>,
    /// Relaxation coefficient the contraction column was evaluated at.
    pub lambda: f64,
    pub model_id: String,
    /// How many trajectory pairs were averaged into this report.
    pub n_trajectories: usize,
}

impl ErrorReport {
    pub fn n_steps(&self) -> usize {
        self.delta_norm.len()
    }

    /// Elementwise mean of several reports over the same grid and model.
    pub fn mean_of(reports: &[ErrorReport]) -> Result<ErrorReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidConfig("cannot average zero reports".into()))?;
        for r in reports {
            if r.t_indices != first.t_indices || r.lambda != first.lambda {
                return Err(Error::Mismatch(
                    "reports to average cover different grids or lambdas".into(),
                ));
            }
        }
        let n = reports.len() as f64;
        let mean = |pick: fn(&ErrorReport) -> &Vec<f64>| -> Vec<f64> {
            (0..first.n_steps())
                .map(|s| reports.iter().map(|r| pick(r)[s]).sum::<f64>() / n)
                .collect()
        };
        Ok(ErrorReport {
            delta_norm: mean(|r| &r.delta_norm),
            amplification: mean(|r| &r.amplification),
            contraction: mean(|r| &r.contraction),
            predicted_delta_norm: mean(|r| &r.predicted_delta_norm),
            iec_bound: mean(|r| &r.iec_bound),
            t_indices: first.t_indices.clone(),
            lambda: first.lambda,
            model_id: first.model_id.clone(),
            n_trajectories: reports.iter().map(|r| r.n_trajectories).sum(),
        })
    }

    /// Writes the report as CSV, one row per step, floats with 17
    /// significant digits.
    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(
            w,
            "step,t_index,delta_norm,amplification,L,predicted_delta_norm,iec_bound"
        )?;
        for s in 0..self.n_steps() {
            writeln!(
                w,
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                s,
                self.t_indices[s],
                self.delta_norm[s],
                self.amplification[s],
                self.contraction[s],
                self.predicted_delta_norm[s],
                self.iec_bound[s],
            )?;
        }
        Ok(())
    }
}

/// Builds the full diagnostic report for a trajectory pair sharing the
/// seed, schedule, and model: measured deviations, amplification and
/// contraction norms at the clean states, the linearized prediction of the
/// deviation, and the per-step corrected-error bound.
pub fn error_curve(
    model: &dyn EpsModel,
    clean: &Trajectory,
    other: &Trajectory,
) -> Result<ErrorReport> {
    if clean.initial_seed != other.initial_seed {
        return Err(Error::Mismatch(
            "trajectories to compare must share the seed".into(),
        ));
    }
    if clean.schedule != other.schedule || &clean.schedule != model.schedule() {
        return Err(Error::Mismatch(
            "trajectories to compare must share the model's schedule".into(),
        ));
    }
    if clean.model_id != other.model_id || clean.model_id != model.id() {
        return Err(Error::Mismatch(
            "trajectories to compare must come from the given model".into(),
        ));
    }
    let t_sample = clean.n_steps();
    let lambda = other.iec.lambda;

    let mut report = ErrorReport {
        delta_norm: Vec::with_capacity(t_sample),
        amplification: Vec::with_capacity(t_sample),
        contraction: Vec::with_capacity(t_sample),
        predicted_delta_norm: Vec::with_capacity(t_sample),
        iec_bound: Vec::with_capacity(t_sample),
        t_indices: Vec::with_capacity(t_sample),
        lambda,
        model_id: clean.model_id.clone(),
        n_trajectories: 1,
    };

    let mut c_terms = Vec::with_capacity(t_sample);
    let mut predicted = DVector::zeros(clean.dim());
    for step in 0..t_sample {
        let coeffs = clean.schedule.step_coeffs(step)?;
        let t = coeffs.t_index;
        let x_src = &clean.states[step];
        let x_tgt = &clean.states[step + 1];
        let delta_in = &other.states[step] - x_src;
        let delta_out = &other.states[step + 1] - x_tgt;
        let eps_delta = &other.eps_deltas[step];

        let j_src = model.jacobian(x_src, t)?;
        report
            .amplification
            .push(amplification_from_jacobian(&coeffs, &j_src));
        let j_tgt = model.jacobian(x_tgt, t)?;
        report
            .contraction
            .push(contraction_from_jacobian(&coeffs, lambda, &j_tgt)?);

        predicted =
            &predicted * coeffs.a + (&j_src * &predicted) * coeffs.b + eps_delta * coeffs.b;
        report.predicted_delta_norm.push(predicted.norm());
        report.delta_norm.push(delta_out.norm());
        report.t_indices.push(t);

        // Numerator of the corrected-error bound: the fixed-point offset
        // (model drift across the transition) plus the step's incoming
        // perturbation, both scaled by the relaxation coefficient.
        let drift = (model.eps(x_tgt, t)? - model.eps(x_src, t)?) * coeffs.b;
        let incoming = &delta_in * coeffs.a + eps_delta * coeffs.b;
        c_terms.push(lambda * (drift.norm() + incoming.norm()));
    }
    report.iec_bound = iec_error_bound(&c_terms, &report.contraction)?;
    Ok(report)
}
