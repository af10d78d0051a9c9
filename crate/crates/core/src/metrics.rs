//! Population-level sample quality via a Fréchet distance on raw
//! coordinates.
//!
//! Generated and reference populations are each summarized by their fitted
//! Gaussian (mean and sample covariance), and compared with
//! `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2·(Σ_a·Σ_b)^{1/2})`. The data here is
//! low-dimensional, so the usual feature embedding is unnecessary and the
//! formula applies to the coordinates directly, preserving the metric's
//! ordering behavior at small scale. The matrix square root is taken on the
//! symmetrized product `Σ_a^{1/2}·Σ_b·Σ_a^{1/2}`, which is positive
//! semidefinite whenever the inputs are and gives the same trace.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{EpsModel, GaussianMixtureModel};

// Eigenvalues of nominally PSD matrices may round slightly negative; this
// far below zero is attributed to roundoff and clamped, anything worse is
// reported as a non-PSD input.
const EIGENVALUE_CLAMP: f64 = -1e-10;

/// A finite population of equal-dimension points with an origin label.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    points: Vec<DVector<f64>>,
    source: String,
}

impl SampleSet {
    /// Validates and wraps a population: at least one point, equal
    /// dimensions, every coordinate finite.
    pub fn new(points: Vec<DVector<f64>>, source: impl Into<String>) -> Result<Self> {
        let first_dim = points
            .first()
            .ok_or_else(|| Error::InvalidConfig("a sample set needs at least one point".into()))?
            .len();
        if first_dim == 0 {
            return Err(Error::InvalidConfig(
                "sample points need at least one coordinate".into(),
            ));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != first_dim {
                return Err(Error::DimensionMismatch {
                    expected: first_dim,
                    found: p.len(),
                });
            }
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    step: None,
                    detail: format!("sample point {i} has a non-finite coordinate"),
                });
            }
        }
        Ok(Self {
            points,
            source: source.into(),
        })
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor requires at least one point
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Coordinate-wise sample mean.
    pub fn mean(&self) -> DVector<f64> {
        let mut sum = DVector::zeros(self.dim());
        for p in &self.points {
            sum += p;
        }
        sum / self.len() as f64
    }

    /// Unbiased sample covariance; needs at least `dim + 1` points.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if self.len() < d + 1 {
            return Err(Error::InvalidConfig(format!(
                "covariance of {d}-dimensional data needs at least {} points, got {}",
                d + 1,
                self.len()
            )));
        }
        let mean = self.mean();
        let mut cov = DMatrix::zeros(d, d);
        for p in &self.points {
            let c = p - &mean;
            cov += &c * c.transpose();
        }
        Ok(cov / (self.len() - 1) as f64)
    }

    /// Writes the points as CSV, one per row, coordinates with 17
    /// significant digits.
    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

// Square root of a symmetric PSD matrix via eigendecomposition, clamping
// roundoff-negative eigenvalues and rejecting genuinely indefinite input.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < EIGENVALUE_CLAMP {
            return Err(Error::NotPositiveDefinite(format!(
                "{what} has eigenvalue {v}, below the roundoff clamp"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

// Trace of the square root of a symmetric PSD matrix.
fn trace_sqrt(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut total = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < EIGENVALUE_CLAMP {
            return Err(Error::NotPositiveDefinite(format!(
                "{what} has eigenvalue {v}, below the roundoff clamp"
            )));
        }
        total += v.max(0.0).sqrt();
    }
    Ok(total)
}

/// Fréchet distance between the Gaussian fits of two populations:
/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2·(Σ_a·Σ_b)^{1/2})`, clamped to zero
/// against roundoff.
pub fn frechet_distance(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let mean_gap = (a.mean() - b.mean()).norm_squared();
    let cov_a = a.covariance()?;
    let cov_b = b.covariance()?;
    let sqrt_a = psd_sqrt(&cov_a, "first covariance")?;
    let product = &sqrt_a * &cov_b * &sqrt_a;
    // Symmetrize against roundoff before the eigendecomposition.
    let product = (&product + product.transpose()) * 0.5;
    let cross = trace_sqrt(&product, "covariance product")?;
    Ok((mean_gap + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Builds a sample set by drawing `n` points from a seeded generator.
pub fn sample_set_from(
    mut draw: impl FnMut(&mut ChaCha8Rng) -> DVector<f64>,
    n: usize,
    seed: u64,
    source: impl Into<String>,
) -> Result<SampleSet> {
    if n < 1 {
        return Err(Error::InvalidConfig(
            "a sample set needs at least one point".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n).map(|_| draw(&mut rng)).collect();
    SampleSet::new(points, source)
}

/// Draws `n` exact samples from the mixture's data distribution (not via
/// the sampler) as the reference population for quality metrics.
pub fn reference_samples(model: &GaussianMixtureModel, n: usize, seed: u64) -> Result<SampleSet> {
    sample_set_from(
        |rng| model.draw_data(rng),
        n,
        seed,
        format!("reference:{}", model.id()),
    )
}
