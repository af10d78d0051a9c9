//! Experiment configuration: a single JSON document wiring the schedule,
//! model, corruption, correction, and batch parameters together.
//!
//! Every field has a default, so `{}` parses to the standard experiment
//! (the three-component mixture, 100 sampling steps, additive corruption
//! with sigma 0.1, single-iteration correction on every step). Unknown
//! keys are rejected everywhere: sweep configs are edited by hand and a
//! silently ignored typo would invalidate a day of runs.

use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{sample_set_from, SampleSet};
use crate::models::{EpsModel, GaussianMixtureModel, LinearGaussianModel};
use crate::perturb::PerturbationConfig;
use crate::sampler::{IecConfig, IecPolicy};
use crate::schedule::{NoiseSchedule, ScheduleKind};

/// Noise-schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Length of the training grid.
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Parameters of a single-Gaussian data distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussianSpec {
    pub mu: Vec<f64>,
    /// Covariance matrix, row-major nested rows.
    pub sigma: Vec<Vec<f64>>,
}

/// Parameters of a Gaussian-mixture data distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// One covariance matrix per component, row-major nested rows.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

/// Which analytic data distribution the model predicts noise for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConfig {
    LinearGaussian(LinearGaussianSpec),
    Mixture(MixtureSpec),
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Mirrors the standard three-component mixture: well-separated
        // unit-covariance components with equal weights.
        ModelConfig::Mixture(MixtureSpec {
            weights: vec![1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0],
            means: vec![vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 2.0]],
            covariances: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 3],
        })
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidConfig("matrix needs at least one row".into()));
    }
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidConfig(format!(
                "matrix row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// A built model of either kind, dispatching the trait by value.
pub enum Model {
    LinearGaussian(LinearGaussianModel),
    Mixture(GaussianMixtureModel),
}

impl Model {
    /// Draws one exact sample from the underlying data distribution.
    pub fn draw_data<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Model::LinearGaussian(m) => m.draw_data(rng),
            Model::Mixture(m) => m.draw_data(rng),
        }
    }

    /// Seeded reference population drawn from the data distribution.
    pub fn reference_set(&self, n: usize, seed: u64) -> Result<SampleSet> {
        sample_set_from(
            |rng| self.draw_data(rng),
            n,
            seed,
            format!("reference:{}", self.id()),
        )
    }
}

impl EpsModel for Model {
    fn dim(&self) -> usize {
        match self {
            Model::LinearGaussian(m) => m.dim(),
            Model::Mixture(m) => m.dim(),
        }
    }

    fn schedule(&self) -> &NoiseSchedule {
        match self {
            Model::LinearGaussian(m) => m.schedule(),
            Model::Mixture(m) => m.schedule(),
        }
    }

    fn id(&self) -> String {
        match self {
            Model::LinearGaussian(m) => m.id(),
            Model::Mixture(m) => m.id(),
        }
    }

    fn eps(&self, x: &DVector<f64>, t_index: usize) -> Result<DVector<f64>> {
        match self {
            Model::LinearGaussian(m) => m.eps(x, t_index),
            Model::Mixture(m) => m.eps(x, t_index),
        }
    }

    fn jacobian(&self, x: &DVector<f64>, t_index: usize) -> Result<DMatrix<f64>> {
        match self {
            Model::LinearGaussian(m) => m.jacobian(x, t_index),
            Model::Mixture(m) => m.jacobian(x, t_index),
        }
    }
}

/// One sweep dimension for the ablation command: the axis name and the
/// values to visit, everything else held at the config's settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    /// Relaxation coefficient of the correction.
    Lambda(Vec<f64>),
    /// Correction iteration budget.
    #[serde(rename = "k")]
    MaxIters(Vec<u32>),
    /// Correction step-selection policy.
    Policy(Vec<IecPolicy>),
    /// Cache recompute interval.
    #[serde(rename = "cache_n")]
    CacheInterval(Vec<usize>),
    /// Quantizer word length.
    Bits(Vec<u32>),
    /// Additive noise scale.
    Sigma(Vec<f64>),
    /// Sampling-grid size.
    #[serde(rename = "t")]
    SampleSteps(Vec<usize>),
}

impl SweepAxis {
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Lambda(v) => v.len(),
            SweepAxis::MaxIters(v) => v.len(),
            SweepAxis::Policy(v) => v.len(),
            SweepAxis::CacheInterval(v) => v.len(),
            SweepAxis::Bits(v) => v.len(),
            SweepAxis::Sigma(v) => v.len(),
            SweepAxis::SampleSteps(v) => v.len(),
        }
    }
}

/// The complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleConfig,
    /// Sampling-grid size; must divide the training grid.
    pub t_sample: usize,
    pub model: ModelConfig,
    pub perturbation: PerturbationConfig,
    pub iec: IecConfig,
    /// Trajectories per arm, seeded `base_seed..base_seed + n`.
    pub n_trajectories: usize,
    pub base_seed: u64,
    /// Output directory for reports and CSVs.
    pub out_dir: PathBuf,
    /// Size of the reference population for quality metrics.
    pub n_reference: usize,
    /// Relaxation coefficients evaluated by the norms command.
    pub lambda_grid: Vec<f64>,
    /// Axis swept by the ablation command.
    pub sweep: Option<SweepAxis>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            t_sample: 100,
            model: ModelConfig::default(),
            perturbation: PerturbationConfig::additive(0.1),
            iec: IecConfig::default(),
            n_trajectories: 100,
            base_seed: 0,
            out_dir: PathBuf::from("runs"),
            n_reference: 4096,
            lambda_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and parses a config file.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.t_train < 1 {
            return Err(Error::InvalidConfig("t_train must be at least 1".into()));
        }
        if !(s.beta_start > 0.0 && s.beta_start < 1.0 && s.beta_end > 0.0 && s.beta_end < 1.0) {
            return Err(Error::InvalidConfig(
                "beta endpoints must lie in (0, 1)".into(),
            ));
        }
        if self.t_sample < 1 || self.t_sample > s.t_train {
            return Err(Error::InvalidConfig(format!(
                "t_sample must lie in 1..={}, got {}",
                s.t_train, self.t_sample
            )));
        }
        if !s.t_train.is_multiple_of(self.t_sample) {
            return Err(Error::InvalidConfig(format!(
                "t_sample {} must divide t_train {}",
                self.t_sample, s.t_train
            )));
        }
        self.perturbation.validate()?;
        self.iec.validate()?;
        if self.n_trajectories < 1 {
            return Err(Error::InvalidConfig(
                "n_trajectories must be at least 1".into(),
            ));
        }
        if self.n_reference < 1 {
            return Err(Error::InvalidConfig(
                "n_reference must be at least 1".into(),
            ));
        }
        for &l in &self.lambda_grid {
            if !l.is_finite() || !(0.0..=1.0).contains(&l) {
                return Err(Error::InvalidConfig(format!(
                    "lambda grid entries must lie in [0, 1], got {l}"
                )));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.is_empty() {
                return Err(Error::InvalidConfig(
                    "a sweep axis needs at least one value".into(),
                ));
            }
        }
        Ok(())
    }

    /// Builds the sampling-grid schedule.
    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        let full = NoiseSchedule::linear(
            self.schedule.t_train,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )?;
        full.select_timesteps(self.t_sample)
    }

    /// Builds the model over a given schedule.
    pub fn build_model(&self, schedule: Arc<NoiseSchedule>) -> Result<Model> {
        match &self.model {
            ModelConfig::LinearGaussian(spec) => {
                let mu = DVector::from_vec(spec.mu.clone());
                let sigma = matrix_from_rows(&spec.sigma)?;
                Ok(Model::LinearGaussian(LinearGaussianModel::new(
                    mu, sigma, schedule,
                )?))
            }
            ModelConfig::Mixture(spec) => {
                let means = spec
                    .means
                    .iter()
                    .map(|m| DVector::from_vec(m.clone()))
                    .collect();
                let covariances = spec
                    .covariances
                    .iter()
                    .map(|c| matrix_from_rows(c))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Model::Mixture(GaussianMixtureModel::new(
                    spec.weights.clone(),
                    means,
                    covariances,
                    schedule,
                )?))
            }
        }
    }

    /// Builds the schedule and the model over it in one call.
    pub fn build(&self) -> Result<(Arc<NoiseSchedule>, Model)> {
        let schedule = Arc::new(self.build_schedule()?);
        let model = self.build_model(schedule.clone())?;
        Ok((schedule, model))
    }
}
