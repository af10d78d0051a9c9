//! Simulated efficiency-technique errors injected into model evaluations.
//!
//! Deployment optimizations corrupt each noise prediction: post-training
//! quantization rounds the output onto a coarse grid, feature caching reuses
//! a stale prediction for several steps, and both are modeled here alongside
//! plain additive noise. An [`Injector`] wraps every model evaluation of one
//! trajectory and applies the configured corruption, while keeping
//! bookkeeping the analysis layer needs: the count of true model
//! evaluations, and the realized per-step injected error
//! `ε_delta = (returned prediction) - ε_θ(x, t)`.
//!
//! Injector noise is drawn from a dedicated counter-based generator keyed by
//! the perturbation seed with the trajectory seed as the stream id, so
//! trajectories are independent of each other and of the prior-sample
//! stream, and every run is exactly reproducible.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::EpsModel;

/// Which corruption an injector applies to each model evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    /// Identity: every evaluation returns the exact model output.
    None,
    /// Adds `N(0, sigma²·I)` noise, freshly drawn per evaluation.
    Additive,
    /// Symmetric uniform quantization of the model output (see
    /// [`quantize_vector`]).
    Quantize,
    /// Recomputes the prediction every `interval_n`-th sampling step and
    /// returns the stale cached prediction in between.
    Cache,
}

/// Configuration of the per-evaluation corruption.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub kind: PerturbationKind,
    /// Standard deviation of additive noise (kind `additive`).
    pub sigma: f64,
    /// Word length of the quantizer (kind `quantize`), at least 2.
    pub bits: u32,
    /// Recompute interval in sampling steps (kind `cache`), at least 1.
    pub interval_n: usize,
    /// Seed of the injector's own noise stream.
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            kind: PerturbationKind::None,
            sigma: 0.1,
            bits: 8,
            interval_n: 1,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn additive(sigma: f64) -> Self {
        Self {
            kind: PerturbationKind::Additive,
            sigma,
            ..Self::default()
        }
    }

    pub fn quantize(bits: u32) -> Self {
        Self {
            kind: PerturbationKind::Quantize,
            bits,
            ..Self::default()
        }
    }

    pub fn cache(interval_n: usize) -> Self {
        Self {
            kind: PerturbationKind::Cache,
            interval_n,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sigma must be finite and nonnegative, got {}",
                self.sigma
            )));
        }
        if self.bits < 2 {
            return Err(Error::InvalidConfig(format!(
                "bits must be at least 2, got {}",
                self.bits
            )));
        }
        if self.interval_n < 1 {
            return Err(Error::InvalidConfig("interval_n must be at least 1".into()));
        }
        Ok(())
    }
}

/// Symmetric uniform quantization with per-call max-abs scaling and
/// round-half-to-even: the scale is `s = max|v_i| / (2^(bits-1) - 1)` and
/// every entry maps to `round(v_i / s)·s`. The zero vector maps to itself.
pub fn quantize_vector(v: &DVector<f64>, bits: u32) -> DVector<f64> {
    let levels = 2f64.powi(bits as i32 - 1) - 1.0;
    let max_abs = v.amax();
    if max_abs == 0.0 {
        return v.clone();
    }
    let s = max_abs / levels;
    v.map(|x| (x / s).round_ties_even() * s)
}

/// How a model evaluation is being used, which decides cache behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRole {
    /// The single per-step evaluation that drives the DDIM update.
    FreshStep { step: usize },
    /// An inner evaluation of the iterative-correction loop at this step.
    IecInner { step: usize },
}

/// Mutable per-trajectory state wrapping every model evaluation with the
/// configured corruption.
///
/// Single-owner by design: each trajectory carries its own injector, so
/// batches of trajectories parallelize without shared state.
pub struct Injector {
    config: PerturbationConfig,
    rng: ChaCha8Rng,
    cached_eps: Option<DVector<f64>>,
    full_eval_count: u64,
    eps_deltas: Vec<DVector<f64>>,
}

impl Injector {
    /// Creates the injector for one trajectory. The noise stream is keyed by
    /// the config seed and uses the trajectory seed as the stream id.
    pub fn new(config: PerturbationConfig, trajectory_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(trajectory_seed);
        Ok(Self {
            config,
            rng,
            cached_eps: None,
            full_eval_count: 0,
            eps_deltas: Vec::new(),
        })
    }

    pub fn config(&self) -> &PerturbationConfig {
        &self.config
    }

    /// Count of true model evaluations performed so far (cache hits and the
    /// bookkeeping evaluations behind them are excluded).
    pub fn full_eval_count(&self) -> u64 {
        self.full_eval_count
    }

    /// Realized injected error of each per-step evaluation so far, in step
    /// order: the returned prediction minus the exact model output at the
    /// same input.
    pub fn eps_deltas(&self) -> &[DVector<f64>] {
        &self.eps_deltas
    }

    /// Last recomputed prediction, if any recompute has happened.
    pub fn cached_eps(&self) -> Option<&DVector<f64>> {
        self.cached_eps.as_ref()
    }

    /// Whether the per-step evaluation at `step` reaches the model (true for
    /// every kind except `cache` on a stale step).
    pub fn step_runs_model(&self, step: usize) -> bool {
        match self.config.kind {
            PerturbationKind::Cache => step.is_multiple_of(self.config.interval_n),
            _ => true,
        }
    }

    fn draw_noise(&mut self, dim: usize) -> DVector<f64> {
        let sigma = self.config.sigma;
        DVector::from_fn(dim, |_, _| sigma * self.rng.sample::<f64, _>(StandardNormal))
    }

    /// Evaluates the deployed (corrupted) model at `(x, t_index)`.
    ///
    /// Per-step evaluations (`StepRole::FreshStep`) additionally record the
    /// realized injected error. Inner correction-loop evaluations
    /// (`StepRole::IecInner`) are full model evaluations for every kind
    /// except `cache` on a stale step, where they return the cached
    /// prediction unchanged (the sampler disables correction there; this
    /// branch is a guard).
    pub fn perturbed_eps(
        &mut self,
        model: &dyn EpsModel,
        x: &DVector<f64>,
        t_index: usize,
        role: StepRole,
    ) -> Result<DVector<f64>> {
        match self.config.kind {
            PerturbationKind::None => {
                let out = model.eps(x, t_index)?;
                self.full_eval_count += 1;
                if let StepRole::FreshStep { .. } = role {
                    self.eps_deltas.push(DVector::zeros(out.len()));
                }
                Ok(out)
            }
            PerturbationKind::Additive => {
                let base = model.eps(x, t_index)?;
                self.full_eval_count += 1;
                let noise = self.draw_noise(base.len());
                let out = &base + &noise;
                if let StepRole::FreshStep { .. } = role {
                    self.eps_deltas.push(noise);
                }
                Ok(out)
            }
            PerturbationKind::Quantize => {
                let base = model.eps(x, t_index)?;
                self.full_eval_count += 1;
                let out = quantize_vector(&base, self.config.bits);
                if let StepRole::FreshStep { .. } = role {
                    self.eps_deltas.push(&out - &base);
                }
                Ok(out)
            }
            PerturbationKind::Cache => self.serve_from_cache(model, x, t_index, role),
        }
    }

    fn serve_from_cache(
        &mut self,
        model: &dyn EpsModel,
        x: &DVector<f64>,
        t_index: usize,
        role: StepRole,
    ) -> Result<DVector<f64>> {
        let interval = self.config.interval_n;
        match role {
            StepRole::FreshStep { step } => {
                if step % interval == 0 {
                    let out = model.eps(x, t_index)?;
                    self.full_eval_count += 1;
                    self.cached_eps = Some(out.clone());
                    self.eps_deltas.push(DVector::zeros(out.len()));
                    Ok(out)
                } else {
                    let out = self.cached_eps.clone().ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "cache read at step {step} before any recompute"
                        ))
                    })?;
                    // Reference evaluation that measures the realized error of
                    // serving a stale prediction; it is bookkeeping, not part
                    // of the deployed model's work, so it is not counted.
                    let reference = model.eps(x, t_index)?;
                    self.eps_deltas.push(&out - &reference);
                    Ok(out)
                }
            }
            StepRole::IecInner { step } => {
                if step % interval == 0 {
                    let out = model.eps(x, t_index)?;
                    self.full_eval_count += 1;
                    // The cache keeps the per-step prediction; inner
                    // correction iterates at refined states must not leak
                    // into later cached steps.
                    Ok(out)
                } else {
                    self.cached_eps.clone().ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "cache read at step {step} before any recompute"
                        ))
                    })
                }
            }
        }
    }
}
