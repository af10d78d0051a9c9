//! Diffusion noise schedules and per-transition DDIM coefficients.
//!
//! A [`NoiseSchedule`] holds the per-step `β_t` of the forward process, the
//! per-step `α_t = 1 - β_t`, their cumulative products `ᾱ_t`, and the
//! sub-sequence of training-grid indices actually visited during sampling.
//! Each reverse transition is characterized by two scalars,
//!
//! ```text
//! A = sqrt(ᾱ_prev / ᾱ_t)
//! B = sqrt(1 - ᾱ_prev) - sqrt(ᾱ_prev) · sqrt(1 - ᾱ_t) / sqrt(ᾱ_t)
//! ```
//!
//! so the deterministic DDIM update is `x_prev = A·x_t + B·ε_θ(x_t, t)`. On a
//! strictly decreasing `ᾱ` sequence every transition has `A > 1` and `B < 0`;
//! those signs drive the error-amplification behavior studied in
//! [`crate::analysis`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported schedule shapes for `β_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `β_t` linearly interpolated between two endpoints.
    Linear,
}

/// The DDIM coefficients of one reverse transition, from the state at
/// training-grid index `t_index` (cumulative `ᾱ_t`) to the state at the
/// previous grid point (cumulative `ᾱ_prev`; defined as 1 for the final
/// transition onto the data manifold).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepCoefficients {
    /// Multiplier of the current state: `sqrt(ᾱ_prev / ᾱ_t)`.
    pub a: f64,
    /// Multiplier of the predicted noise:
    /// `sqrt(1 - ᾱ_prev) - A·sqrt(1 - ᾱ_t)`.
    pub b: f64,
    /// Cumulative `ᾱ` at the source of the transition.
    pub alpha_bar_t: f64,
    /// Cumulative `ᾱ` at the target of the transition.
    pub alpha_bar_prev: f64,
    /// Training-grid timestep of the source state.
    pub t_index: usize,
}

impl StepCoefficients {
    /// Computes the coefficients directly from a pair of cumulative `ᾱ`
    /// values. Both must lie in `(0, 1]`.
    pub fn from_alpha_bars(alpha_bar_t: f64, alpha_bar_prev: f64, t_index: usize) -> Result<Self> {
        for (name, v) in [("alpha_bar_t", alpha_bar_t), ("alpha_bar_prev", alpha_bar_prev)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in (0, 1], got {v}"
                )));
            }
        }
        let a = (alpha_bar_prev / alpha_bar_t).sqrt();
        // Algebraically identical to the definition above; reusing `a` makes
        // the equal-noise-level case come out as exactly (A, B) = (1, 0).
        let b = (1.0 - alpha_bar_prev).sqrt() - a * (1.0 - alpha_bar_t).sqrt();
        Ok(Self {
            a,
            b,
            alpha_bar_t,
            alpha_bar_prev,
            t_index,
        })
    }
}

/// A diffusion noise schedule plus the sampling sub-sequence.
///
/// Immutable after construction; cheap to clone and safe to share across
/// worker threads.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Strictly increasing training-grid indices visited during sampling,
    /// traversed in reverse (largest index first).
    sample_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Builds a linear schedule: `β` interpolated from `beta_start` to
    /// `beta_end` inclusive over `t_train` points, with `sample_steps`
    /// initialized to the full grid.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train < 1 {
            return Err(Error::InvalidConfig("t_train must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta range must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = if t_train == 1 {
            vec![beta_start]
        } else {
            (0..t_train)
                .map(|i| {
                    let frac = i as f64 / (t_train - 1) as f64;
                    beta_start + frac * (beta_end - beta_start)
                })
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from an explicit `β` sequence. Every entry must lie
    /// in `(0, 1)`. Useful for pinning exact `ᾱ` values in tests.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidConfig("betas must be non-empty".into()));
        }
        if let Some(bad) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidConfig(format!(
                "every beta must lie in (0, 1), got {bad}"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let sample_steps = (0..betas.len()).collect();
        Ok(Self {
            kind: ScheduleKind::Linear,
            betas,
            alphas,
            alpha_bars,
            sample_steps,
        })
    }

    /// Returns a copy of the schedule whose `sample_steps` is the uniform
    /// sub-grid of `t_sample` indices at stride `floor(t_train / t_sample)`,
    /// starting at index 0.
    pub fn select_timesteps(&self, t_sample: usize) -> Result<Self> {
        let t_train = self.t_train();
        if t_sample < 1 || t_sample > t_train {
            return Err(Error::InvalidConfig(format!(
                "t_sample must lie in [1, {t_train}], got {t_sample}"
            )));
        }
        let stride = t_train / t_sample;
        let mut out = self.clone();
        out.sample_steps = (0..t_sample).map(|i| i * stride).collect();
        Ok(out)
    }

    /// Number of training-grid steps.
    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    /// Number of sampling steps (reverse transitions).
    pub fn t_sample(&self) -> usize {
        self.sample_steps.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sample_steps(&self) -> &[usize] {
        &self.sample_steps
    }

    /// Cumulative `ᾱ` at a training-grid index.
    pub fn alpha_bar(&self, t_index: usize) -> Result<f64> {
        self.alpha_bars
            .get(t_index)
            .copied()
            .ok_or(Error::DimensionMismatch {
                expected: self.alpha_bars.len(),
                found: t_index,
            })
    }

    /// Coefficients of one reverse transition.
    ///
    /// `position` counts sampling steps from the start of the reverse
    /// process: position 0 leaves the initial noise state (the largest entry
    /// of `sample_steps`), and the final position transitions onto the data
    /// manifold, where the target `ᾱ` is defined as exactly 1.
    pub fn step_coeffs(&self, position: usize) -> Result<StepCoefficients> {
        let s = self.sample_steps.len();
        if position >= s {
            return Err(Error::InvalidConfig(format!(
                "position must lie in [0, {s}), got {position}"
            )));
        }
        let source = self.sample_steps[s - 1 - position];
        let alpha_bar_t = self.alpha_bars[source];
        let alpha_bar_prev = if position + 1 < s {
            self.alpha_bars[self.sample_steps[s - 2 - position]]
        } else {
            1.0
        };
        StepCoefficients::from_alpha_bars(alpha_bar_t, alpha_bar_prev, source)
    }

    /// Training-grid index of the source state of a transition; same indexing
    /// as [`NoiseSchedule::step_coeffs`].
    pub fn source_index(&self, position: usize) -> Result<usize> {
        let s = self.sample_steps.len();
        if position >= s {
            return Err(Error::InvalidConfig(format!(
                "position must lie in [0, {s}), got {position}"
            )));
        }
        Ok(self.sample_steps[s - 1 - position])
    }

    /// Training-grid index of the target state of a transition, or `None`
    /// for the final transition (whose target is the data manifold, not a
    /// grid point).
    pub fn target_index(&self, position: usize) -> Result<Option<usize>> {
        let s = self.sample_steps.len();
        if position >= s {
            return Err(Error::InvalidConfig(format!(
                "position must lie in [0, {s}), got {position}"
            )));
        }
        if position + 1 < s {
            Ok(Some(self.sample_steps[s - 2 - position]))
        } else {
            Ok(None)
        }
    }
}
