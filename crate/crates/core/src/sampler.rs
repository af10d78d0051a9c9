//! Deterministic reverse-diffusion sampling with optional per-step
//! fixed-point correction.
//!
//! A trajectory starts from a seeded standard-normal draw and walks the
//! sampling grid with the deterministic update `x_prev = a·x + b·ε̃(x, t)`,
//! where `ε̃` is the deployed (possibly corrupted) model served by a
//! [`perturb::Injector`](crate::perturb::Injector). On selected steps the
//! update's output is refined by relaxed fixed-point iteration
//! (`iec_refine`): the corrupted update rule is re-applied at the current
//! estimate and the iterate moves a fraction `lambda` toward it, which
//! contracts toward the rule's fixed point whenever the local contraction
//! constant stays below one.
//!
//! All randomness is counter-based and keyed by the trajectory seed: the
//! prior draw uses a reserved stream id so that clean, corrupted, and
//! corrected runs of the same seed start from the identical `x_T`.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::EpsModel;
use crate::perturb::{Injector, PerturbationConfig, StepRole};
use crate::schedule::{NoiseSchedule, StepCoefficients};

/// Which sampling steps run the fixed-point correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IecPolicy {
    /// Correct every step.
    All,
    /// Correct nothing (baseline arms).
    None,
    /// Correct the first `ceil(f·T)` and last `floor(f·T)` steps; the
    /// fraction must lie in `(0, 0.5]`.
    FirstLast(f64),
    /// Correct exactly the listed step indices (out-of-range entries are
    /// dropped).
    Explicit(Vec<usize>),
}

/// Timestep fed to the model inside the correction loop.
///
/// The correction re-evaluates the model at candidate target states; the
/// plain reading of the update rule keeps the source timestep `t` for those
/// evaluations, which is the default. `Target` switches to the target
/// timestep (falling back to the source on the last transition, whose
/// target lies off the grid) so the two conventions can be A/B-tested.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerTimestep {
    Source,
    Target,
}

/// Configuration of the per-step fixed-point correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IecConfig {
    /// Relaxation coefficient in `(0, 1]`.
    pub lambda: f64,
    /// Iteration budget per corrected step; 0 disables correction.
    pub max_iters: u32,
    /// Early-stop threshold on the Euclidean norm of the iterate update.
    pub threshold: f64,
    /// Step-selection policy.
    pub policy: IecPolicy,
    /// Timestep convention for inner evaluations.
    pub inner_timestep: InnerTimestep,
}

impl Default for IecConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            max_iters: 1,
            threshold: 1e-5,
            policy: IecPolicy::All,
            inner_timestep: InnerTimestep::Source,
        }
    }
}

impl IecConfig {
    /// Correction disabled: the baseline arms use this.
    pub fn none() -> Self {
        Self {
            policy: IecPolicy::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda <= 0.0 || self.lambda > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in (0, 1], got {}",
                self.lambda
            )));
        }
        if !self.threshold.is_finite() || self.threshold <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if let IecPolicy::FirstLast(f) = self.policy {
            if !f.is_finite() || f <= 0.0 || f > 0.5 {
                return Err(Error::InvalidConfig(format!(
                    "first_last fraction must lie in (0, 0.5], got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Resolves a step-selection policy to the concrete set of sampling steps.
pub fn select_iec_steps(policy: &IecPolicy, t_sample: usize) -> BTreeSet<usize> {
    match policy {
        IecPolicy::All => (0..t_sample).collect(),
        IecPolicy::None => BTreeSet::new(),
        IecPolicy::FirstLast(f) => {
            let head = ((f * t_sample as f64).ceil() as usize).min(t_sample);
            let tail = ((f * t_sample as f64).floor() as usize).min(t_sample);
            let mut set: BTreeSet<usize> = (0..head).collect();
            set.extend(t_sample - tail..t_sample);
            set
        }
        IecPolicy::Explicit(steps) => steps.iter().copied().filter(|&s| s < t_sample).collect(),
    }
}

/// One deterministic reverse transition: `a·x + b·eps`.
pub fn ddim_step(
    x: &DVector<f64>,
    eps: &DVector<f64>,
    coeffs: &StepCoefficients,
) -> Result<DVector<f64>> {
    if x.len() != eps.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: eps.len(),
        });
    }
    Ok(x * coeffs.a + eps * coeffs.b)
}

/// Result of one fixed-point refinement.
#[derive(Clone, Debug)]
pub struct IecOutcome {
    /// Final iterate.
    pub x: DVector<f64>,
    /// Iterations performed; each one costs exactly one model evaluation.
    pub iters: u32,
    /// Euclidean norm of each applied update `x_next - x_current`.
    pub residuals: Vec<f64>,
    /// True when the divergence guard fired and `x` is the best iterate
    /// seen rather than the last.
    pub aborted: bool,
}

// A refinement is declared divergent when a residual exceeds the first
// residual by this factor; the loop then returns the best iterate seen.
const DIVERGENCE_FACTOR: f64 = 1e6;

/// Noise-prediction callback handed to the refinement loop: maps a state and
/// a training-grid timestep to the (possibly corrupted) model output.
pub type EpsEval<'a> = dyn FnMut(&DVector<f64>, usize) -> Result<DVector<f64>> + 'a;

/// Relaxed fixed-point refinement of one transition's output.
///
/// Starting from `x_init` (the plain update output), each iteration
/// re-applies the update rule at the current iterate and moves a fraction
/// `lambda` toward it: `x ← x + lambda·(a·x_t + b·eval(x, inner_t) − x)`.
/// Stops once the applied update is shorter than `cfg.threshold` or the
/// iteration budget is spent; returns the final iterate together with the
/// residual history. `eval` is the deployed model (corruption included);
/// `inner_t_index` is the training-grid timestep fed to it.
pub fn iec_refine(
    x_t: &DVector<f64>,
    x_init: &DVector<f64>,
    coeffs: &StepCoefficients,
    inner_t_index: usize,
    cfg: &IecConfig,
    eval: &mut EpsEval<'_>,
) -> Result<IecOutcome> {
    cfg.validate()?;
    if x_t.len() != x_init.len() {
        return Err(Error::DimensionMismatch {
            expected: x_t.len(),
            found: x_init.len(),
        });
    }
    let mut x = x_init.clone();
    let mut residuals = Vec::new();
    if cfg.max_iters == 0 {
        return Ok(IecOutcome {
            x,
            iters: 0,
            residuals,
            aborted: false,
        });
    }

    let mut first_residual = None;
    let mut best: Option<(DVector<f64>, f64)> = None;
    for k in 0..cfg.max_iters {
        let eps = eval(&x, inner_t_index)?;
        let proposal = ddim_step(x_t, &eps, coeffs)?;
        let update = (&proposal - &x) * cfg.lambda;
        let residual = update.norm();
        residuals.push(residual);
        if !residual.is_finite() {
            let ratio = residuals
                .len()
                .checked_sub(2)
                .map(|i| residual / residuals[i])
                .unwrap_or(f64::INFINITY);
            return Err(Error::NonFinite {
                step: None,
                detail: format!(
                    "fixed-point refinement diverged at iteration {k}; \
                     last residual expansion ratio {ratio:.3e}"
                ),
            });
        }
        x += update;

        let first = *first_residual.get_or_insert(residual);
        if best.as_ref().is_none_or(|(_, r)| residual < *r) {
            best = Some((x.clone(), residual));
        }
        if residual > DIVERGENCE_FACTOR * first {
            let (best_x, _) = best.expect("at least one iterate recorded");
            return Ok(IecOutcome {
                x: best_x,
                iters: k + 1,
                residuals,
                aborted: true,
            });
        }
        if residual < cfg.threshold {
            return Ok(IecOutcome {
                x,
                iters: k + 1,
                residuals,
                aborted: false,
            });
        }
    }
    Ok(IecOutcome {
        x,
        iters: cfg.max_iters,
        residuals,
        aborted: false,
    })
}

/// Reserved stream id of the prior draw, distinct from every injector
/// stream so paired arms share `x_T` regardless of the corruption kind.
pub const PRIOR_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seeded standard-normal prior sample `x_T`.
pub fn draw_prior(trajectory_seed: u64, dim: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed);
    rng.set_stream(PRIOR_STREAM);
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// One complete sampled trajectory plus the bookkeeping the analysis layer
/// consumes.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// States from the prior down to the sample: `states[0] = x_T`,
    /// `states[t_sample] = x_0`.
    pub states: Vec<DVector<f64>>,
    /// Seed this trajectory was launched with.
    pub initial_seed: u64,
    /// Total model evaluations performed (fresh steps plus correction
    /// iterations; cache bookkeeping excluded).
    pub full_eval_count: u64,
    /// Correction iterations applied at each step (0 on uncorrected steps).
    pub per_step_iec_iters: Vec<u32>,
    /// Realized injected error of each step's served prediction.
    pub eps_deltas: Vec<DVector<f64>>,
    /// Steps whose refinement hit the divergence guard.
    pub iec_abort_steps: Vec<usize>,
    /// Schedule the trajectory was sampled under.
    pub schedule: NoiseSchedule,
    /// Identifier of the model that produced the predictions.
    pub model_id: String,
    /// Corruption configuration in force.
    pub perturbation: PerturbationConfig,
    /// Correction configuration in force.
    pub iec: IecConfig,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// The generated sample `x_0`.
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("states is never empty")
    }
}

fn attach_step(err: Error, step: usize) -> Error {
    match err {
        Error::NonFinite { step: None, detail } => Error::NonFinite {
            step: Some(step),
            detail,
        },
        other => other,
    }
}

fn ensure_finite(x: &DVector<f64>, step: usize, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: Some(step),
            detail: format!("{what} contains a non-finite entry"),
        })
    }
}

/// Samples one trajectory: seeded prior, deterministic transitions through
/// the injector-served model, and fixed-point correction on the steps the
/// policy selects.
///
/// Correction runs only where the step's prediction is freshly computed;
/// under interval caching the stale steps reuse a prediction made at
/// another state, so there is no per-step fixed point to refine and those
/// steps are skipped. Every inner correction evaluation passes through the
/// injector (the deployed model is the corrupted one) and is counted.
pub fn sample_trajectory(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    perturbation: &PerturbationConfig,
    iec: &IecConfig,
    seed: u64,
) -> Result<Trajectory> {
    if schedule != model.schedule() {
        return Err(Error::Mismatch(
            "sampling schedule differs from the model's schedule".into(),
        ));
    }
    iec.validate()?;
    let mut injector = Injector::new(*perturbation, seed)?;
    let t_sample = schedule.t_sample();
    let dim = model.dim();
    let iec_steps = select_iec_steps(&iec.policy, t_sample);

    let mut states = Vec::with_capacity(t_sample + 1);
    let mut per_step_iec_iters = Vec::with_capacity(t_sample);
    let mut iec_abort_steps = Vec::new();
    let mut x = draw_prior(seed, dim);
    states.push(x.clone());

    for step in 0..t_sample {
        let coeffs = schedule.step_coeffs(step)?;
        let source_t = coeffs.t_index;
        let eps = injector
            .perturbed_eps(model, &x, source_t, StepRole::FreshStep { step })
            .map_err(|e| attach_step(e, step))?;
        let mut x_next = ddim_step(&x, &eps, &coeffs)?;
        ensure_finite(&x_next, step, "transition output")?;

        let correct =
            iec.max_iters > 0 && iec_steps.contains(&step) && injector.step_runs_model(step);
        if correct {
            let inner_t = match iec.inner_timestep {
                InnerTimestep::Source => source_t,
                InnerTimestep::Target => schedule.target_index(step)?.unwrap_or(source_t),
            };
            let outcome = iec_refine(&x, &x_next, &coeffs, inner_t, iec, &mut |probe, t| {
                injector.perturbed_eps(model, probe, t, StepRole::IecInner { step })
            })
            .map_err(|e| attach_step(e, step))?;
            per_step_iec_iters.push(outcome.iters);
            if outcome.aborted {
                iec_abort_steps.push(step);
            }
            x_next = outcome.x;
            ensure_finite(&x_next, step, "refined state")?;
        } else {
            per_step_iec_iters.push(0);
        }

        states.push(x_next.clone());
        x = x_next;
    }

    Ok(Trajectory {
        states,
        initial_seed: seed,
        full_eval_count: injector.full_eval_count(),
        per_step_iec_iters,
        eps_deltas: injector.eps_deltas().to_vec(),
        iec_abort_steps,
        schedule: schedule.clone(),
        model_id: model.id(),
        perturbation: *perturbation,
        iec: iec.clone(),
    })
}
