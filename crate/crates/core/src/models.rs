//! Closed-form noise-prediction models.
//!
//! These stand in for trained denoising networks. For data x₀ drawn from a
//! known distribution, the forward process produces `x_t = sqrt(ᾱ_t)·x₀ +
//! sqrt(1-ᾱ_t)·z`, and the optimal noise prediction `E[z | x_t]` has a closed
//! form when the data is a Gaussian or a Gaussian mixture:
//!
//! - [`LinearGaussianModel`]: data `N(μ, Σ)` gives
//!   `ε(x, t) = sqrt(1-ᾱ_t) · C_t⁻¹ · (x - sqrt(ᾱ_t)·μ)` with
//!   `C_t = ᾱ_t·Σ + (1-ᾱ_t)·I`. The prediction is exactly linear in `x`, so
//!   first-order error propagation is exact and downstream recursion checks
//!   can run at machine precision.
//! - [`GaussianMixtureModel`]: a responsibility-weighted combination of
//!   per-component terms. The prediction is genuinely nonlinear, with a
//!   state-dependent Jacobian that includes the responsibility-gradient
//!   outer-product correction.
//!
//! Both models expose exact analytic Jacobians; anything implementing
//! [`EpsModel`] without an override falls back to central finite differences.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// A noise-prediction function `ε_θ(x, t)` over a fixed noise schedule.
///
/// Implementations are immutable and their evaluations pure, so models are
/// safe to share across worker threads. Evaluation counting lives in the
/// sampler's injector, not here.
pub trait EpsModel: Send + Sync {
    /// Dimension of the state space.
    fn dim(&self) -> usize;

    /// The schedule whose `ᾱ` grid the model is defined over.
    fn schedule(&self) -> &NoiseSchedule;

    /// Short identifier echoed into reports.
    fn id(&self) -> String;

    /// Noise prediction at state `x` and training-grid index `t_index`.
    fn eps(&self, x: &DVector<f64>, t_index: usize) -> Result<DVector<f64>>;

    /// Jacobian `∂ε/∂x` at `(x, t_index)`.
    ///
    /// The default implementation uses central finite differences with step
    /// `h = 1e-5·(1 + ‖x‖)`; analytic models override it exactly.
    fn jacobian(&self, x: &DVector<f64>, t_index: usize) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        let h = 1e-5 * (1.0 + x.norm());
        let mut jac = DMatrix::zeros(d, d);
        let mut probe = x.clone();
        for j in 0..d {
            probe[j] = x[j] + h;
            let plus = self.eps(&probe, t_index)?;
            probe[j] = x[j] - h;
            let minus = self.eps(&probe, t_index)?;
            probe[j] = x[j];
            jac.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        Ok(jac)
    }
}

/// Adapter that forwards evaluations of an inner model but hides its analytic
/// Jacobian, so the default finite-difference path can be exercised and
/// validated against the exact one.
pub struct FiniteDifferenceView<'a, M: EpsModel>(pub &'a M);

impl<M: EpsModel> EpsModel for FiniteDifferenceView<'_, M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn schedule(&self) -> &NoiseSchedule {
        self.0.schedule()
    }
    fn id(&self) -> String {
        format!("fd_view({})", self.0.id())
    }
    fn eps(&self, x: &DVector<f64>, t_index: usize) -> Result<DVector<f64>> {
        self.0.eps(x, t_index)
    }
}

/// Per-timestep precomputed factors for one Gaussian component: the
/// precision `C_t⁻¹`, its log-determinant, and `sqrt(ᾱ_t)·mean`.
struct ComponentFactors {
    precision: DMatrix<f64>,
    log_det: f64,
    scaled_mean: DVector<f64>,
}

fn validate_symmetric_dim(m: &DMatrix<f64>, d: usize, name: &str) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: m.nrows().max(m.ncols()),
        });
    }
    let scale = m.amax().max(1.0);
    for i in 0..d {
        for j in (i + 1)..d {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::NotPositiveDefinite(format!(
                    "{name} is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Builds `C_t = ᾱ_t·cov + (1-ᾱ_t)·I` factors for every training-grid index.
fn component_factors(
    schedule: &NoiseSchedule,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    name: &str,
) -> Result<Vec<ComponentFactors>> {
    let d = mean.len();
    schedule
        .alpha_bars()
        .iter()
        .map(|&ab| {
            let c_t = cov * ab + DMatrix::identity(d, d) * (1.0 - ab);
            let chol = nalgebra::Cholesky::new(c_t).ok_or_else(|| {
                Error::NotPositiveDefinite(format!("{name}: C_t at alpha_bar {ab}"))
            })?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            Ok(ComponentFactors {
                precision: chol.inverse(),
                log_det,
                scaled_mean: mean * ab.sqrt(),
            })
        })
        .collect()
}

/// Cholesky factor of a data-space covariance, for drawing ground-truth
/// samples.
fn data_factor(cov: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(cov.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(name.to_string()))
}

/// Optimal noise prediction for Gaussian data `N(μ, Σ)`.
pub struct LinearGaussianModel {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    schedule: Arc<NoiseSchedule>,
    factors: Vec<ComponentFactors>,
    data_chol: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, schedule: Arc<NoiseSchedule>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidConfig("model dimension must be positive".into()));
        }
        validate_symmetric_dim(&sigma, d, "sigma")?;
        let factors = component_factors(&schedule, &mu, &sigma, "sigma")?;
        let data_chol = data_factor(&sigma, "sigma")?;
        Ok(Self {
            mu,
            sigma,
            schedule,
            factors,
            data_chol,
        })
    }

    /// Standard-normal data: `μ = 0`, `Σ = I`.
    pub fn standard(dim: usize, schedule: Arc<NoiseSchedule>) -> Result<Self> {
        Self::new(
            DVector::zeros(dim),
            DMatrix::identity(dim, dim),
            schedule,
        )
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// The exact affine form of the prediction at one timestep:
    /// `ε(x, t) = M_t·x + b_t`. Feeds closed-form fixed-point oracles.
    pub fn linear_coeffs(&self, t_index: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let f = self.factors.get(t_index).ok_or(Error::DimensionMismatch {
            expected: self.factors.len(),
            found: t_index,
        })?;
        let scale = (1.0 - self.schedule.alpha_bars()[t_index]).sqrt();
        let m = &f.precision * scale;
        let b = -(&m * &f.scaled_mean);
        Ok((m, b))
    }

    /// One exact draw from the data distribution `N(μ, Σ)`.
    pub fn draw_data<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.mu.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mu + &self.data_chol * z
    }
}

impl EpsModel for LinearGaussianModel {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn id(&self) -> String {
        format!("linear_gaussian(d={})", self.mu.len())
    }

    fn eps(&self, x: &DVector<f64>, t_index: usize) -> Result<DVector<f64>> {
        if x.len() != self.mu.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mu.len(),
                found: x.len(),
            });
        }
        let f = self.factors.get(t_index).ok_or(Error::DimensionMismatch {
            expected: self.factors.len(),
            found: t_index,
        })?;
        let scale = (1.0 - self.schedule.alpha_bars()[t_index]).sqrt();
        Ok(&f.precision * (x - &f.scaled_mean) * scale)
    }

    fn jacobian(&self, x: &DVector<f64>, t_index: usize) -> Result<DMatrix<f64>> {
        if x.len() != self.mu.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mu.len(),
                found: x.len(),
            });
        }
        let f = self.factors.get(t_index).ok_or(Error::DimensionMismatch {
            expected: self.factors.len(),
            found: t_index,
        })?;
        let scale = (1.0 - self.schedule.alpha_bars()[t_index]).sqrt();
        Ok(&f.precision * scale)
    }
}

/// Optimal noise prediction for Gaussian-mixture data.
///
/// Responsibilities are computed with a log-sum-exp over active components,
/// so far-from-data states saturate gracefully instead of overflowing.
/// Components with weight zero are skipped entirely.
pub struct GaussianMixtureModel {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    schedule: Arc<NoiseSchedule>,
    /// `factors[k][t]` for active component `k` (paired with `active`).
    factors: Vec<Vec<ComponentFactors>>,
    /// Indices of components with positive weight.
    active: Vec<usize>,
    log_weights: Vec<f64>,
    data_chols: Vec<DMatrix<f64>>,
}

impl GaussianMixtureModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
        schedule: Arc<NoiseSchedule>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidConfig("mixture needs at least one component".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::InvalidConfig(format!(
                "mixture has {k} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "mixture weights must sum to 1, got {total}"
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidConfig("model dimension must be positive".into()));
        }
        for (i, m) in means.iter().enumerate() {
            if m.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: m.len(),
                });
            }
            validate_symmetric_dim(&covariances[i], d, &format!("covariance {i}"))?;
        }
        let active: Vec<usize> = (0..k).filter(|&i| weights[i] > 0.0).collect();
        if active.is_empty() {
            return Err(Error::InvalidConfig("mixture needs a positive weight".into()));
        }
        let factors = active
            .iter()
            .map(|&i| component_factors(&schedule, &means[i], &covariances[i], &format!("covariance {i}")))
            .collect::<Result<Vec<_>>>()?;
        let log_weights = active.iter().map(|&i| weights[i].ln()).collect();
        let data_chols = (0..k)
            .map(|i| data_factor(&covariances[i], &format!("covariance {i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            means,
            covariances,
            schedule,
            factors,
            active,
            log_weights,
            data_chols,
        })
    }

    /// The default experimental mixture: three well-separated components at
    /// (2, 0), (-2, 0), and (0, 2) with unit covariances and equal weights.
    /// Visibly multimodal, so the Jacobian varies strongly across basin
    /// boundaries.
    pub fn default_mixture(schedule: Arc<NoiseSchedule>) -> Result<Self> {
        let third = 1.0 / 3.0;
        Self::new(
            vec![third, third, 1.0 - 2.0 * third],
            vec![
                DVector::from_vec(vec![2.0, 0.0]),
                DVector::from_vec(vec![-2.0, 0.0]),
                DVector::from_vec(vec![0.0, 2.0]),
            ],
            vec![DMatrix::identity(2, 2); 3],
            schedule,
        )
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// Responsibilities and per-component terms `u_k = C_t⁻¹(x - sqrt(ᾱ)·m_k)`
    /// at one state, over active components only.
    fn responsibilities(
        &self,
        x: &DVector<f64>,
        t_index: usize,
    ) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
        let t_train = self.schedule.t_train();
        if t_index >= t_train {
            return Err(Error::DimensionMismatch {
                expected: t_train,
                found: t_index,
            });
        }
        let mut log_unnorm = Vec::with_capacity(self.active.len());
        let mut us = Vec::with_capacity(self.active.len());
        for (slot, _) in self.active.iter().enumerate() {
            let f = &self.factors[slot][t_index];
            let centered = x - &f.scaled_mean;
            let u = &f.precision * &centered;
            let quad = centered.dot(&u);
            log_unnorm.push(self.log_weights[slot] - 0.5 * quad - 0.5 * f.log_det);
            us.push(u);
        }
        let max = log_unnorm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = log_unnorm.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        for r in &mut resp {
            *r /= total;
        }
        Ok((resp, us))
    }

    /// One exact draw from the data mixture.
    pub fn draw_data<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut comp = *self.active.last().expect("at least one active component");
        for &k in &self.active {
            cum += self.weights[k];
            if u < cum {
                comp = k;
                break;
            }
        }
        let d = self.means[0].len();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.means[comp] + &self.data_chols[comp] * z
    }
}

impl EpsModel for GaussianMixtureModel {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn id(&self) -> String {
        format!("gaussian_mixture(k={},d={})", self.weights.len(), self.means[0].len())
    }

    fn eps(&self, x: &DVector<f64>, t_index: usize) -> Result<DVector<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        let (resp, us) = self.responsibilities(x, t_index)?;
        let scale = (1.0 - self.schedule.alpha_bars()[t_index]).sqrt();
        let mut out = DVector::zeros(d);
        for (r, u) in resp.iter().zip(&us) {
            out += u * *r;
        }
        Ok(out * scale)
    }

    fn jacobian(&self, x: &DVector<f64>, t_index: usize) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        let (resp, us) = self.responsibilities(x, t_index)?;
        let scale = (1.0 - self.schedule.alpha_bars()[t_index]).sqrt();
        // J/scale = Σ r_k·C_k⁻¹ + ū·ūᵀ - Σ r_k·u_k·u_kᵀ, where the last two
        // terms come from differentiating the responsibilities themselves.
        let mut mean_u = DVector::zeros(d);
        for (r, u) in resp.iter().zip(&us) {
            mean_u += u * *r;
        }
        let mut jac = &mean_u * mean_u.transpose();
        for (slot, (r, u)) in resp.iter().zip(&us).enumerate() {
            jac += &self.factors[slot][t_index].precision * *r;
            jac -= u * u.transpose() * *r;
        }
        Ok(jac * scale)
    }
}
