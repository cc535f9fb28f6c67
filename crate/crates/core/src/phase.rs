//! Phase segmentation of demonstrations and per-timestep references.
//!
//! Demonstrations are pooled on a common time axis (each one rescaled to the
//! model horizon), clustered by a Gaussian mixture over time and Cartesian
//! position, and the time marginal of that mixture weights the datapoints of
//! every phase. Each phase gets one Gaussian per chart; per-timestep
//! references blend the phase Gaussians in the tangent space of the
//! dominant phase.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::charts::{align_orientation, chart_coords, CartesianPose, ChartId, RigidTransform, Space};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::manifold::ManifoldPoint;
use crate::stats::{select_winner, ManifoldGaussian, COVARIANCE_FLOOR};

/// Diagonal loading of mixture covariances.
pub const GMM_REGULARIZATION: f64 = 1e-6;
pub const GMM_TOLERANCE: f64 = 1e-8;
pub const GMM_MAX_ITERATIONS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub id: String,
    pub dt: f64,
    frames: Vec<(usize, CartesianPose)>,
    pub object_frame: RigidTransform,
}

impl Demonstration {
    pub fn new(
        id: impl Into<String>,
        dt: f64,
        frames: Vec<(usize, CartesianPose)>,
        object_frame: RigidTransform,
    ) -> Result<Self> {
        let id = id.into();
        if frames.len() < 2 {
            return Err(Error::InsufficientData(format!("demonstration `{id}` has fewer than two frames")));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("demonstration `{id}`: dt must be positive")));
        }
        if frames[0].0 != 0 {
            return Err(Error::InvalidArgument(format!("demonstration `{id}` must start at timestep 0")));
        }
        if let Some(w) = frames.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidArgument(format!(
                "demonstration `{id}`: timesteps not strictly increasing at frame {}",
                w + 1
            )));
        }
        let space = object_frame.space();
        if let Some(i) = frames.iter().position(|(_, p)| p.space() != space) {
            return Err(Error::Demo {
                id,
                frame: i,
                source: Box::new(Error::InvalidArgument("pose space differs from the object frame".into())),
            });
        }
        Ok(Self {
            id,
            dt,
            frames,
            object_frame,
        })
    }

    pub fn frames(&self) -> &[(usize, CartesianPose)] {
        &self.frames
    }

    pub fn space(&self) -> Space {
        self.object_frame.space()
    }

    pub fn last_timestep(&self) -> usize {
        self.frames.last().map_or(0, |f| f.0)
    }

    /// Time of frame `i` rescaled onto `0..=horizon - 1`.
    pub fn normalized_time(&self, i: usize, horizon: usize) -> f64 {
        self.frames[i].0 as f64 / self.last_timestep() as f64 * (horizon.saturating_sub(1)) as f64
    }
}

/// Gaussian mixture over `[time, position]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGmm {
    pub priors: Vec<f64>,
    #[serde(with = "crate::serde_util::vectors")]
    pub means: Vec<DVector<f64>>,
    #[serde(with = "crate::serde_util::matrices")]
    pub covariances: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Components that collapsed at some point and were re-initialized or
    /// re-regularized.
    pub degenerate: Vec<usize>,
}

impl TimeGmm {
    pub fn components(&self) -> usize {
        self.priors.len()
    }

    /// Responsibilities of each component given only the time coordinate.
    pub fn time_weights(&self, t: f64) -> DVector<f64> {
        let logs: Vec<f64> = (0..self.components())
            .map(|k| {
                let var = self.covariances[k][(0, 0)];
                let d = t - self.means[k][0];
                self.priors[k].ln() - 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
            })
            .collect();
        normalize_logs(&logs)
    }
}

fn normalize_logs(logs: &[f64]) -> DVector<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w = DVector::from_iterator(logs.len(), logs.iter().map(|l| (l - max).exp()));
    let total = w.sum();
    w /= total;
    w
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Pooled `[time, object-frame position]` datapoints.
fn pooled_features(demos: &[Demonstration], horizon: usize) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::new();
    for demo in demos {
        for (i, (_, pose)) in demo.frames().iter().enumerate() {
            let local = demo.object_frame.to_local(pose).map_err(|e| Error::Demo {
                id: demo.id.clone(),
                frame: i,
                source: Box::new(e),
            })?;
            let p = local.position();
            let mut x = DVector::zeros(p.len() + 1);
            x[0] = demo.normalized_time(i, horizon);
            x.rows_mut(1, p.len()).copy_from(&p);
            out.push(x);
        }
    }
    Ok(out)
}

struct Component {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn regularized(mut cov: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let min_eig = cov.clone().symmetric_eigenvalues().min();
    let n = cov.nrows();
    for i in 0..n {
        cov[(i, i)] += GMM_REGULARIZATION;
    }
    (cov, min_eig < 1e-9)
}

fn log_gauss(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let d = x - mean;
    let n = d.len() as f64;
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + d.dot(&chol.solve(&d)))
}

fn weighted_stats(data: &[DVector<f64>], weights: &[f64]) -> (DVector<f64>, DMatrix<f64>, f64) {
    let dim = data[0].len();
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(dim);
    for (x, w) in data.iter().zip(weights) {
        mean.axpy(*w / total, x, 1.0);
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (x, w) in data.iter().zip(weights) {
        let d = x - &mean;
        cov.ger(*w / total, &d, &d, 1.0);
    }
    (mean, cov, total)
}

/// EM on pooled `[time, position]` datapoints, initialized by slicing the
/// time-sorted data into `k` equal-count bins. Deterministic for a given
/// seed and data order; the seed only drives re-initialization of
/// collapsed components.
pub fn fit_time_gmm(demos: &[Demonstration], k: usize, seed: u64, horizon: usize) -> Result<TimeGmm> {
    if k == 0 {
        return Err(Error::InvalidArgument("component count must be at least 1".into()));
    }
    if demos.is_empty() {
        return Err(Error::EmptyInput);
    }
    let data = pooled_features(demos, horizon)?;
    let n = data.len();
    if n < 10 * k {
        return Err(Error::InsufficientData(format!(
            "{n} datapoints for {k} components (need at least {})",
            10 * k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut degenerate = Vec::new();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data[a][0].total_cmp(&data[b][0]));
    let mut comps = Vec::with_capacity(k);
    let mut priors = vec![1.0 / k as f64; k];
    for j in 0..k {
        let bin: Vec<DVector<f64>> = order[j * n / k..(j + 1) * n / k]
            .iter()
            .map(|&i| data[i].clone())
            .collect();
        let (mean, cov, _) = weighted_stats(&bin, &vec![1.0; bin.len()]);
        let (cov, collapsed) = regularized(cov);
        if collapsed {
            degenerate.push(j);
        }
        comps.push(Component { mean, cov });
    }
    let (_, pooled_cov, _) = weighted_stats(&data, &vec![1.0; n]);

    let mut resp = DMatrix::zeros(n, k);
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for iteration in 1..=GMM_MAX_ITERATIONS {
        iterations = iteration;
        // E step
        let chols: Vec<Cholesky<f64, Dyn>> = comps
            .iter()
            .map(|c| {
                Cholesky::new(c.cov.clone())
                    .or_else(|| Cholesky::new(&c.cov + DMatrix::identity(c.cov.nrows(), c.cov.nrows()) * 1e-3))
                    .expect("regularized covariance is positive definite")
            })
            .collect();
        ll = 0.0;
        let mut logs = vec![0.0; k];
        for (i, x) in data.iter().enumerate() {
            for j in 0..k {
                logs[j] = priors[j].ln() + log_gauss(x, &comps[j].mean, &chols[j]);
            }
            let lse = log_sum_exp(&logs);
            ll += lse;
            for j in 0..k {
                resp[(i, j)] = (logs[j] - lse).exp();
            }
        }
        if iteration > 1 && ll - prev_ll < GMM_TOLERANCE {
            converged = true;
            break;
        }
        prev_ll = ll;
        // M step
        for j in 0..k {
            let w: Vec<f64> = resp.column(j).iter().copied().collect();
            let nk: f64 = w.iter().sum();
            if nk < 1e-8 * n as f64 {
                let pick = rng.random_range(0..n);
                comps[j] = Component {
                    mean: data[pick].clone(),
                    cov: pooled_cov.clone(),
                };
                priors[j] = 1.0 / k as f64;
                if !degenerate.contains(&j) {
                    degenerate.push(j);
                }
                continue;
            }
            let (mean, cov, total) = weighted_stats(&data, &w);
            let (cov, collapsed) = regularized(cov);
            if collapsed && !degenerate.contains(&j) {
                degenerate.push(j);
            }
            comps[j] = Component { mean, cov };
            priors[j] = total / n as f64;
        }
        let total: f64 = priors.iter().sum();
        priors.iter_mut().for_each(|p| *p /= total);
    }
    degenerate.sort_unstable();
    Ok(TimeGmm {
        priors,
        means: comps.iter().map(|c| c.mean.clone()).collect(),
        covariances: comps.into_iter().map(|c| c.cov).collect(),
        log_likelihood: ll,
        iterations,
        converged,
        degenerate,
    })
}

/// `T x K` matrix of time-marginal responsibilities `h_k(t)`.
pub fn phase_weights(gmm: &TimeGmm, horizon: usize) -> DMatrix<f64> {
    let k = gmm.components();
    let mut out = DMatrix::zeros(horizon, k);
    for t in 0..horizon {
        out.set_row(t, &gmm.time_weights(t as f64).transpose());
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseWeighting {
    /// Soft time-marginal responsibilities.
    #[default]
    Marginal,
    /// One-hot weights on the component with the largest responsibility.
    Hard,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regression {
    /// Tangent-space blend of phase means anchored at the dominant phase.
    #[default]
    Blend,
    /// The dominant phase's Gaussian, switching at phase boundaries.
    Stepwise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceBlend {
    /// Blend covariances, then invert.
    #[default]
    Moment,
    /// Blend precisions.
    Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseModelConfig {
    pub horizon: usize,
    pub weighting: PhaseWeighting,
    pub regression: Regression,
    pub covariance_blend: CovarianceBlend,
    /// Optional per-chart tangent length scales applied to determinants
    /// before comparing charts. Raw determinants are compared when absent.
    pub characteristic_lengths: Option<BTreeMap<ChartId, Vec<f64>>>,
}

impl Default for PhaseModelConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            weighting: PhaseWeighting::Marginal,
            regression: Regression::Blend,
            covariance_blend: CovarianceBlend::Moment,
            characteristic_lengths: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseModel {
    pub horizon: usize,
    pub charts: Vec<ChartId>,
    /// One Gaussian per chart for every phase.
    pub phases: Vec<BTreeMap<ChartId, ManifoldGaussian>>,
    /// Determinant of the position block, per phase and chart.
    pub position_dets: Vec<BTreeMap<ChartId, f64>>,
    pub phase_winners: Vec<ChartId>,
    /// `T x K` weights used for the references.
    #[serde(with = "crate::serde_util::matrix")]
    pub weights: DMatrix<f64>,
    /// Per-chart, per-timestep references.
    pub references: BTreeMap<ChartId, Vec<ManifoldGaussian>>,
    pub winners: Vec<ChartId>,
    pub config: PhaseModelConfig,
    pub warnings: Vec<String>,
}

impl PhaseModel {
    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    pub fn reference(&self, chart: ChartId, t: usize) -> Option<&ManifoldGaussian> {
        self.references.get(&chart).and_then(|r| r.get(t))
    }

    /// Phase with the largest weight at timestep `t`.
    pub fn dominant_phase(&self, t: usize) -> usize {
        self.weights.row(t).transpose().argmax().0
    }

    /// Last timestep at which each phase dominates, if it ever does.
    pub fn phase_ends(&self) -> Vec<Option<usize>> {
        let mut ends = vec![None; self.phase_count()];
        for t in 0..self.horizon {
            ends[self.dominant_phase(t)] = Some(t);
        }
        ends
    }

    pub fn phase_dets(&self) -> Vec<BTreeMap<ChartId, f64>> {
        self.phases
            .iter()
            .map(|p| p.iter().map(|(c, g)| (*c, g.det())).collect())
            .collect()
    }
}

fn chart_error(demo: &Demonstration, frame: usize, e: Error) -> Error {
    Error::Demo {
        id: demo.id.clone(),
        frame,
        source: Box::new(e),
    }
}

/// Fits a Gaussian to chart points, handling the quaternion double cover by
/// aligning every orientation with the first sample and then with the mean.
pub fn fit_chart_gaussian(chart: ChartId, points: &[DVector<f64>], weights: &[f64]) -> Result<ManifoldGaussian> {
    let spec = chart.spec();
    let mut pts: Vec<DVector<f64>> = points.to_vec();
    if let Some(first) = weights.iter().position(|w| *w > 0.0) {
        let reference = pts[first].clone();
        for p in pts.iter_mut() {
            align_orientation(chart, p, &reference);
        }
    }
    let fit = |pts: &[DVector<f64>]| -> Result<ManifoldGaussian> {
        let samples: Vec<_> = pts
            .iter()
            .zip(weights)
            .map(|(p, w)| {
                crate::stats::WeightedSample::new(ManifoldPoint::from_parts_unchecked(spec.clone(), p.clone()), *w)
            })
            .collect();
        crate::stats::fit_gaussian(&samples, &spec)
    };
    let g = fit(&pts)?;
    if chart.space() == Space::ThreeD {
        let mean = g.mean().coords().clone();
        let mut flipped = false;
        for p in pts.iter_mut() {
            flipped |= align_orientation(chart, p, &mean);
        }
        if flipped {
            return fit(&pts);
        }
    }
    Ok(g)
}

/// Weights of one frame under the configured weighting.
fn frame_weights(gmm: &TimeGmm, t: f64, weighting: PhaseWeighting) -> DVector<f64> {
    let w = gmm.time_weights(t);
    match weighting {
        PhaseWeighting::Marginal => w,
        PhaseWeighting::Hard => one_hot(w.len(), w.argmax().0),
    }
}

fn one_hot(n: usize, k: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[k] = 1.0;
    v
}

/// Builds per-phase Gaussians in every chart, per-timestep references and
/// the per-timestep chart selection.
pub fn build_phase_model(
    demos: &[Demonstration],
    gmm: &TimeGmm,
    charts: &[ChartId],
    config: &PhaseModelConfig,
) -> Result<PhaseModel> {
    build_phase_model_with(demos, gmm, charts, config, Execution::Sequential)
}

pub fn build_phase_model_with(
    demos: &[Demonstration],
    gmm: &TimeGmm,
    charts: &[ChartId],
    config: &PhaseModelConfig,
    exec: Execution,
) -> Result<PhaseModel> {
    if demos.is_empty() || charts.is_empty() {
        return Err(Error::EmptyInput);
    }
    let space = demos[0].space();
    if let Some(c) = charts.iter().find(|c| c.space() != space) {
        return Err(Error::InvalidArgument(format!("chart {c} does not match the demonstration space")));
    }
    if let Some(d) = demos.iter().find(|d| d.space() != space) {
        return Err(Error::InvalidArgument(format!("demonstration `{}` is in a different space", d.id)));
    }
    let horizon = config.horizon;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let k = gmm.components();
    let mut warnings = Vec::new();

    // chart points and phase weights of every frame
    let mut frame_w: Vec<DVector<f64>> = Vec::new();
    let mut points: BTreeMap<ChartId, Vec<DVector<f64>>> = charts.iter().map(|c| (*c, Vec::new())).collect();
    for demo in demos {
        for (i, (_, pose)) in demo.frames().iter().enumerate() {
            frame_w.push(frame_weights(gmm, demo.normalized_time(i, horizon), config.weighting));
            for chart in charts {
                let c = chart_coords(pose, *chart, &demo.object_frame).map_err(|e| chart_error(demo, i, e))?;
                points.get_mut(chart).expect("chart present").push(c);
            }
        }
    }

    let jobs: Vec<(usize, ChartId)> = (0..k).flat_map(|j| charts.iter().map(move |c| (j, *c))).collect();
    let fitted = exec.map(&jobs, |&(j, chart)| {
        let w: Vec<f64> = frame_w.iter().map(|w| w[j]).collect();
        fit_chart_gaussian(chart, &points[&chart], &w).map_err(|e| Error::Fit {
            phase: j,
            chart: chart.to_string(),
            source: Box::new(e),
        })
    });
    let mut phases: Vec<BTreeMap<ChartId, ManifoldGaussian>> = vec![BTreeMap::new(); k];
    for ((j, chart), g) in jobs.iter().zip(fitted) {
        phases[*j].insert(*chart, g?);
    }

    let dets_of = |gs: &BTreeMap<ChartId, ManifoldGaussian>| -> Result<Vec<(ChartId, f64)>> {
        gs.iter()
            .map(|(c, g)| {
                let det = match config.characteristic_lengths.as_ref().and_then(|m| m.get(c)) {
                    Some(lengths) => g.scaled_det(lengths)?,
                    None => g.det(),
                };
                Ok((*c, det))
            })
            .collect()
    };
    let phase_winners = phases
        .iter()
        .map(|gs| select_winner(dets_of(gs)?))
        .collect::<Result<Vec<_>>>()?;
    let position_dets = phases
        .iter()
        .map(|gs| {
            gs.iter()
                .map(|(c, g)| (*c, g.block_det(0, c.position_spec().tangent_dim())))
                .collect()
        })
        .collect();

    let floor_dim = phases
        .iter()
        .flat_map(|gs| gs.iter())
        .filter(|(_, g)| g.floored())
        .count();
    if floor_dim > 0 {
        warnings.push(format!(
            "{floor_dim} phase covariance(s) were lifted to the regularization floor {COVARIANCE_FLOOR:e}"
        ));
    }
    if !gmm.degenerate.is_empty() {
        warnings.push(format!("mixture components {:?} collapsed and were re-regularized", gmm.degenerate));
    }

    let mut weights = phase_weights(gmm, horizon);
    if config.weighting == PhaseWeighting::Hard {
        for t in 0..horizon {
            let a = weights.row(t).transpose().argmax().0;
            weights.set_row(t, &one_hot(k, a).transpose());
        }
    }

    let per_chart = exec.map(charts, |chart| {
        (0..horizon)
            .map(|t| blended_reference(*chart, &phases, &weights.row(t).transpose(), config))
            .collect::<Result<Vec<_>>>()
            .map(|refs| (*chart, refs))
    });
    let references = per_chart.into_iter().collect::<Result<BTreeMap<_, _>>>()?;

    let winners = (0..horizon)
        .map(|t| {
            let at_t: BTreeMap<ChartId, ManifoldGaussian> =
                references.iter().map(|(c, r)| (*c, r[t].clone())).collect();
            select_winner(dets_of(&at_t)?)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PhaseModel {
        horizon,
        charts: charts.to_vec(),
        phases,
        position_dets,
        phase_winners,
        weights,
        references,
        winners,
        config: config.clone(),
        warnings,
    })
}

fn blended_reference(
    chart: ChartId,
    phases: &[BTreeMap<ChartId, ManifoldGaussian>],
    h: &DVector<f64>,
    config: &PhaseModelConfig,
) -> Result<ManifoldGaussian> {
    let spec = chart.spec();
    let anchor_phase = h.argmax().0;
    let anchor = &phases[anchor_phase][&chart];
    if config.regression == Regression::Stepwise {
        return Ok(anchor.clone());
    }
    let anchor_mean = anchor.mean().coords();
    let aligned_means: Vec<DVector<f64>> = phases
        .iter()
        .map(|p| {
            let mut m = p[&chart].mean().coords().clone();
            align_orientation(chart, &mut m, anchor_mean);
            m
        })
        .collect();
    let mut u = DVector::zeros(spec.tangent_dim());
    for (m, w) in aligned_means.iter().zip(h.iter()) {
        if *w > 0.0 {
            u += spec.log(anchor_mean, m)? * *w;
        }
    }
    let mean = spec.exp(anchor_mean, &u)?;
    let n = spec.tangent_dim();
    let mut blend = DMatrix::zeros(n, n);
    for ((p, m), w) in phases.iter().zip(&aligned_means).zip(h.iter()) {
        if *w <= 0.0 {
            continue;
        }
        let g = &p[&chart];
        let transport = spec.transport_matrix(m, &mean)?;
        let local = match config.covariance_blend {
            CovarianceBlend::Moment => g.covariance(),
            CovarianceBlend::Precision => g.precision(),
        };
        blend += &transport * local * transport.transpose() * *w;
    }
    let cov = match config.covariance_blend {
        CovarianceBlend::Moment => blend,
        CovarianceBlend::Precision => blend
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("blended precision is singular".into()))?,
    };
    ManifoldGaussian::new(ManifoldPoint::from_parts_unchecked(spec, mean), cov)
}
