//! Gaussian distributions on manifolds: geometric means by Gauss-Newton
//! iteration, covariances in the tangent space of the mean, densities, and
//! the smallest-determinant chart selection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::charts::ChartId;
use crate::error::{Error, Result};
use crate::manifold::{ManifoldPoint, ManifoldSpec};

/// Lower bound on covariance eigenvalues, in tangent units squared.
pub const COVARIANCE_FLOOR: f64 = 1e-8;
/// Mean iteration stops once the tangent update is shorter than this.
pub const MEAN_TOLERANCE: f64 = 1e-10;
pub const MEAN_MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSample {
    pub point: ManifoldPoint,
    pub weight: f64,
}

impl WeightedSample {
    pub fn new(point: ManifoldPoint, weight: f64) -> Self {
        Self { point, weight }
    }

    pub fn unit(point: ManifoldPoint) -> Self {
        Self { point, weight: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanEstimate {
    pub point: ManifoldPoint,
    pub iterations: usize,
    pub converged: bool,
}

/// Normalized weights and the points they belong to, zero weights dropped.
struct Prepared<'a> {
    points: Vec<&'a DVector<f64>>,
    weights: Vec<f64>,
}

fn prepare<'a>(samples: &'a [WeightedSample], spec: &ManifoldSpec) -> Result<Prepared<'a>> {
    let mut points = Vec::with_capacity(samples.len());
    let mut weights = Vec::with_capacity(samples.len());
    for s in samples {
        if s.point.spec() != spec {
            return Err(Error::SpecMismatch {
                expected: spec.to_string(),
                found: s.point.spec().to_string(),
            });
        }
        if !(s.weight >= 0.0) || !s.weight.is_finite() {
            return Err(Error::InvalidArgument(format!("sample weight {} is not a finite non-negative number", s.weight)));
        }
        if s.weight > 0.0 {
            points.push(s.point.coords());
            weights.push(s.weight);
        }
    }
    let total: f64 = weights.iter().sum();
    if points.is_empty() || total <= 0.0 {
        return Err(Error::EmptySample);
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(Prepared { points, weights })
}

fn mean_of(prepared: &Prepared<'_>, spec: &ManifoldSpec) -> Result<(DVector<f64>, usize, bool)> {
    let mut mu = prepared.points[0].clone();
    let n = spec.tangent_dim();
    for iteration in 1..=MEAN_MAX_ITERATIONS {
        let mut u = DVector::zeros(n);
        for (x, w) in prepared.points.iter().zip(&prepared.weights) {
            u += spec.log(&mu, x)? * *w;
        }
        mu = spec.exp(&mu, &u)?;
        if u.norm() < MEAN_TOLERANCE {
            return Ok((mu, iteration, true));
        }
    }
    Ok((mu, MEAN_MAX_ITERATIONS, false))
}

/// Weighted geometric (Frechet) mean by the fixed-point iteration
/// `mu <- Exp_mu(sum_i w_i Log_mu(x_i))`, started at the first sample.
///
/// Non-convergence is reported through [`MeanEstimate::converged`] rather
/// than as an error; the last iterate is returned.
pub fn geometric_mean(samples: &[WeightedSample], spec: &ManifoldSpec) -> Result<MeanEstimate> {
    let prepared = prepare(samples, spec)?;
    let (mu, iterations, converged) = mean_of(&prepared, spec)?;
    Ok(MeanEstimate {
        point: ManifoldPoint::from_parts_unchecked(spec.clone(), mu),
        iterations,
        converged,
    })
}

/// Gaussian on a manifold with its covariance in the tangent space of the mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGaussian", into = "RawGaussian")]
pub struct ManifoldGaussian {
    mean: ManifoldPoint,
    covariance: DMatrix<f64>,
    det: f64,
    precision: DMatrix<f64>,
    floored: bool,
}

#[derive(Serialize, Deserialize)]
struct RawGaussian {
    mean: ManifoldPoint,
    covariance: Vec<Vec<f64>>,
    det: f64,
}

impl TryFrom<RawGaussian> for ManifoldGaussian {
    type Error = Error;

    fn try_from(raw: RawGaussian) -> Result<Self> {
        let n = raw.covariance.len();
        if raw.covariance.iter().any(|row| row.len() != n) {
            return Err(Error::Schema("covariance must be square".into()));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| raw.covariance[i][j]);
        ManifoldGaussian::new(raw.mean, cov)
    }
}

impl From<ManifoldGaussian> for RawGaussian {
    fn from(g: ManifoldGaussian) -> Self {
        RawGaussian {
            covariance: matrix_rows(&g.covariance),
            det: g.det,
            mean: g.mean,
        }
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl ManifoldGaussian {
    /// Builds a Gaussian, lifting covariance eigenvalues to [`COVARIANCE_FLOOR`].
    pub fn new(mean: ManifoldPoint, covariance: DMatrix<f64>) -> Result<Self> {
        Self::with_floor(mean, covariance, COVARIANCE_FLOOR)
    }

    pub fn with_floor(mean: ManifoldPoint, covariance: DMatrix<f64>, floor: f64) -> Result<Self> {
        let n = mean.spec().tangent_dim();
        if covariance.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: covariance.nrows(),
            });
        }
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("covariance has non-finite entries".into()));
        }
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let eigen = SymmetricEigen::new(sym.clone());
        let floored = eigen.eigenvalues.iter().any(|&l| l < floor);
        let values = eigen.eigenvalues.map(|l| l.max(floor));
        let covariance = if floored {
            &eigen.eigenvectors * DMatrix::from_diagonal(&values) * eigen.eigenvectors.transpose()
        } else {
            sym
        };
        let det = values.iter().product();
        let precision = &eigen.eigenvectors
            * DMatrix::from_diagonal(&values.map(|l| 1.0 / l))
            * eigen.eigenvectors.transpose();
        Ok(Self {
            mean,
            covariance,
            det,
            precision,
            floored,
        })
    }

    pub fn mean(&self) -> &ManifoldPoint {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// True when at least one eigenvalue was lifted to the floor.
    pub fn floored(&self) -> bool {
        self.floored
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// Determinant of the covariance sub-block `offset..offset + len`.
    pub fn block_det(&self, offset: usize, len: usize) -> f64 {
        self.covariance.view((offset, offset), (len, len)).into_owned().determinant()
    }

    /// Determinant after rescaling each tangent axis by `1 / lengths[i]`.
    pub fn scaled_det(&self, lengths: &[f64]) -> Result<f64> {
        if lengths.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: lengths.len(),
            });
        }
        Ok(lengths.iter().fold(self.det, |d, l| d / (l * l)))
    }
}

/// Fits a Gaussian: geometric mean, then the weighted second moment of the
/// tangent residuals at the mean, regularized by [`COVARIANCE_FLOOR`].
pub fn fit_gaussian(samples: &[WeightedSample], spec: &ManifoldSpec) -> Result<ManifoldGaussian> {
    fit_gaussian_with_floor(samples, spec, COVARIANCE_FLOOR)
}

pub fn fit_gaussian_with_floor(
    samples: &[WeightedSample],
    spec: &ManifoldSpec,
    floor: f64,
) -> Result<ManifoldGaussian> {
    let prepared = prepare(samples, spec)?;
    let (mu, _, _) = mean_of(&prepared, spec)?;
    let cov = tangent_covariance(&prepared.points, &prepared.weights, spec, &mu)?;
    ManifoldGaussian::with_floor(ManifoldPoint::from_parts_unchecked(spec.clone(), mu), cov, floor)
}

fn tangent_covariance(
    points: &[&DVector<f64>],
    weights: &[f64],
    spec: &ManifoldSpec,
    mu: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = spec.tangent_dim();
    let mut cov = DMatrix::zeros(n, n);
    for (x, w) in points.iter().zip(weights) {
        let r = spec.log(mu, x)?;
        cov.ger(*w, &r, &r, 1.0);
    }
    Ok(cov)
}

/// Log of the manifold Gaussian density at `x`.
pub fn log_density(g: &ManifoldGaussian, x: &ManifoldPoint) -> Result<f64> {
    if g.mean.spec() != x.spec() {
        return Err(Error::SpecMismatch {
            expected: g.mean.spec().to_string(),
            found: x.spec().to_string(),
        });
    }
    let r = g.mean.spec().log(g.mean.coords(), x.coords())?;
    let d = g.dim() as f64;
    let mahalanobis = r.dot(&(&g.precision * &r));
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + g.det.ln() + mahalanobis))
}

/// Chart with the smallest covariance determinant; ties go to the lowest
/// chart index.
pub fn select_winner<I>(determinants: I) -> Result<ChartId>
where
    I: IntoIterator<Item = (ChartId, f64)>,
{
    let mut best: Option<(ChartId, f64)> = None;
    for (chart, det) in determinants {
        if !det.is_finite() || det <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "determinant for {chart} must be finite and positive, got {det}"
            )));
        }
        best = match best {
            Some((c, d)) if d < det || (d == det && c < chart) => Some((c, d)),
            _ => Some((chart, det)),
        };
    }
    best.map(|(c, _)| c).ok_or(Error::EmptyInput)
}

/// [`select_winner`] over fitted Gaussians.
pub fn select_winner_gaussians<'a, I>(gaussians: I) -> Result<ChartId>
where
    I: IntoIterator<Item = (&'a ChartId, &'a ManifoldGaussian)>,
{
    select_winner(gaussians.into_iter().map(|(c, g)| (*c, g.det())))
}
