//! Batch iLQR over joint-velocity controls with Gauss-Newton updates and a
//! backtracking line search.
//!
//! The state cost at timestep `t` is `f_tᵀ Q_t f_t` where `f_t` is the
//! logarithmic map of the end-effector pose, expressed in the selected
//! chart, at the reference mean. The control cost is `r uᵀu`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::charts::{align_orientation, chart_coords, chart_jacobian, ChartId, RigidTransform, Space};
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, kinematic_jacobian, rollout, ArmModel, JointTrajectory};
use crate::phase::PhaseModel;
use crate::stats::ManifoldGaussian;

pub const DEFAULT_CONTROL_WEIGHT: f64 = 1e-2;
pub const DEFAULT_ACTIVATION_START: usize = 20;
pub const MAX_ITERATIONS: usize = 100;
pub const MIN_STEP: f64 = 1e-4;
pub const RELATIVE_TOLERANCE: f64 = 1e-9;
pub const STEP_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub chart: ChartId,
    #[serde(with = "crate::serde_util::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "crate::serde_util::matrix")]
    pub precision: DMatrix<f64>,
}

impl Reference {
    pub fn from_gaussian(chart: ChartId, g: &ManifoldGaussian) -> Self {
        Self {
            chart,
            mean: g.mean().coords().clone(),
            precision: g.precision().clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanProblem {
    pub arm: ArmModel,
    #[serde(with = "crate::serde_util::vector")]
    pub q0: DVector<f64>,
    pub horizon: usize,
    pub dt: f64,
    pub object_frame: RigidTransform,
    pub references: Vec<Option<Reference>>,
    pub control_weight: f64,
    pub activation_start: usize,
}

impl PlanProblem {
    pub fn new(
        arm: ArmModel,
        q0: DVector<f64>,
        dt: f64,
        object_frame: RigidTransform,
        references: Vec<Option<Reference>>,
    ) -> Self {
        Self {
            arm,
            q0,
            horizon: references.len(),
            dt,
            object_frame,
            references,
            control_weight: DEFAULT_CONTROL_WEIGHT,
            activation_start: DEFAULT_ACTIVATION_START,
        }
    }

    pub fn dof(&self) -> usize {
        self.arm.dof()
    }

    /// Reference at `t` if it is past the activation window.
    pub fn active(&self, t: usize) -> Option<&Reference> {
        if t < self.activation_start {
            return None;
        }
        self.references.get(t).and_then(Option::as_ref)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q0.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                found: self.q0.len(),
            });
        }
        if self.references.len() != self.horizon {
            return Err(Error::HorizonMismatch {
                expected: self.horizon,
                found: self.references.len(),
            });
        }
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("horizon and dt must be positive".into()));
        }
        if !(self.control_weight >= 0.0) || !self.control_weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "control weight must be non-negative, got {}",
                self.control_weight
            )));
        }
        if self.object_frame.space() != Space::TwoD {
            return Err(Error::InvalidArgument("planning needs a planar object frame".into()));
        }
        let mut any = false;
        for (t, r) in self.references.iter().enumerate() {
            let Some(r) = r else { continue };
            if r.chart.space() != Space::TwoD {
                return Err(Error::InvalidArgument(format!("timestep {t}: chart {} is not planar", r.chart)));
            }
            let spec = r.chart.spec();
            spec.validate_point(&r.mean)?;
            let n = spec.tangent_dim();
            if r.precision.shape() != (n, n) {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: r.precision.nrows(),
                });
            }
            if (&r.precision - r.precision.transpose()).amax() > 1e-9 * r.precision.amax().max(1.0) {
                return Err(Error::InvalidArgument(format!("timestep {t}: precision is not symmetric")));
            }
            any |= t >= self.activation_start;
        }
        if !any {
            return Err(Error::InvalidArgument("no active reference".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Stacked residuals of the active timesteps and their Jacobian with
/// respect to the stacked joint states.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub residuals: DVector<f64>,
    /// `m x (D T)`, block-diagonal per timestep.
    pub jacobian: DMatrix<f64>,
    /// Block-diagonal `m x m` precision.
    pub precision: DMatrix<f64>,
    /// `(timestep, row offset, rows)` of every active block.
    pub blocks: Vec<(usize, usize, usize)>,
}

impl Linearization {
    pub fn state_cost(&self) -> f64 {
        self.residuals.dot(&(&self.precision * &self.residuals))
    }

    /// Jacobian with respect to the stacked controls.
    pub fn control_jacobian(&self, dof: usize, dt: f64) -> DMatrix<f64> {
        // q_t depends on u_s for s < t with coefficient dt
        let cols = self.jacobian.ncols();
        let mut out = DMatrix::zeros(self.jacobian.nrows(), cols);
        for &(t, row, len) in &self.blocks {
            let jt = self.jacobian.view((row, t * dof), (len, dof)) * dt;
            for s in 0..t {
                out.view_mut((row, s * dof), (len, dof)).copy_from(&jt);
            }
        }
        out
    }
}

fn tangent_residual(
    problem: &PlanProblem,
    t: usize,
    reference: &Reference,
    q: &DVector<f64>,
    with_jacobian: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    let singular = |e: Error| match e {
        Error::OriginSingularity { .. } | Error::AntipodalPoint | Error::FrameSingularity => {
            Error::ChartSingularity { timestep: t }
        }
        other => other,
    };
    let pose = forward_kinematics(&problem.arm, q)?;
    let mut x = chart_coords(&pose, reference.chart, &problem.object_frame).map_err(singular)?;
    align_orientation(reference.chart, &mut x, &reference.mean);
    let spec = reference.chart.spec();
    let f = spec.log(&reference.mean, &x).map_err(singular)?;
    if !with_jacobian {
        return Ok((f, None));
    }
    let j = spec.log_jacobian(&reference.mean, &x).map_err(singular)?
        * chart_jacobian(&pose, reference.chart, &problem.object_frame).map_err(singular)?
        * kinematic_jacobian(&problem.arm, q)?;
    Ok((f, Some(j)))
}

fn check_controls(problem: &PlanProblem, u: &DVector<f64>) -> Result<()> {
    let n = problem.dof() * problem.horizon;
    if u.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: u.len(),
        });
    }
    Ok(())
}

/// Residuals and Jacobian of the active references along the rollout of `u`.
pub fn residuals_and_jacobian(problem: &PlanProblem, u: &DVector<f64>) -> Result<Linearization> {
    linearize(problem, u, true)
}

fn linearize(problem: &PlanProblem, u: &DVector<f64>, with_jacobian: bool) -> Result<Linearization> {
    check_controls(problem, u)?;
    let d = problem.dof();
    let states = rollout(&problem.q0, u, problem.dt)?;
    let mut blocks = Vec::new();
    let mut parts = Vec::new();
    let mut rows = 0;
    for t in 0..problem.horizon {
        let Some(reference) = problem.active(t) else { continue };
        let q = states.row(t).transpose();
        let (f, j) = tangent_residual(problem, t, reference, &q, with_jacobian)?;
        blocks.push((t, rows, f.len()));
        rows += f.len();
        parts.push((f, j, reference));
    }
    let mut residuals = DVector::zeros(rows);
    let mut jacobian = DMatrix::zeros(if with_jacobian { rows } else { 0 }, d * problem.horizon);
    let mut precision = DMatrix::zeros(rows, rows);
    for (&(t, row, len), (f, j, reference)) in blocks.iter().zip(parts) {
        residuals.rows_mut(row, len).copy_from(&f);
        precision.view_mut((row, row), (len, len)).copy_from(&reference.precision);
        if let Some(j) = j {
            jacobian.view_mut((row, t * d), (len, d)).copy_from(&j);
        }
    }
    Ok(Linearization {
        residuals,
        jacobian,
        precision,
        blocks,
    })
}

/// Total cost, or `+inf` when the rollout meets a chart singularity.
pub fn total_cost(problem: &PlanProblem, u: &DVector<f64>) -> Result<f64> {
    match linearize(problem, u, false) {
        Ok(lin) => Ok(lin.state_cost() + problem.control_weight * u.norm_squared()),
        Err(Error::ChartSingularity { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Per-timestep Gauss-Newton terms `M_t = J_tᵀQ_tJ_t` and `v_t = J_tᵀQ_tf_t`.
fn normal_terms(d: usize, horizon: usize, lin: &Linearization) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
    let mut m = vec![DMatrix::zeros(d, d); horizon];
    let mut v = vec![DVector::zeros(d); horizon];
    for &(t, row, len) in &lin.blocks {
        let j = lin.jacobian.view((row, t * d), (len, d));
        let q = lin.precision.view((row, row), (len, len));
        let qj = q * j;
        m[t] += j.tr_mul(&qj);
        v[t] += qj.tr_mul(&lin.residuals.rows(row, len));
    }
    (m, v)
}

/// One Gauss-Newton update
/// `(S_uᵀJᵀQJS_u + R)⁻¹(-S_uᵀJᵀQf - Ru)`.
///
/// With `r > 0` the same minimizer is found in the cumulative displacements
/// `y_t = q_t - q_0`, where the control cost couples only neighbouring
/// timesteps and the system is block tridiagonal. With `r = 0` the dense
/// normal equations are factorized so rank deficiency is reported.
pub fn gauss_newton_step(problem: &PlanProblem, u: &DVector<f64>, lin: &Linearization) -> Result<DVector<f64>> {
    check_controls(problem, u)?;
    if problem.control_weight > 0.0 {
        tridiagonal_step(problem, u, lin)
    } else {
        dense_step(problem, u, lin)
    }
}

fn tridiagonal_step(problem: &PlanProblem, u: &DVector<f64>, lin: &Linearization) -> Result<DVector<f64>> {
    let (d, horizon, dt) = (problem.dof(), problem.horizon, problem.dt);
    let (m, v) = normal_terms(d, horizon, lin);
    let r = problem.control_weight;
    let c = r / (dt * dt);
    // current displacements y_t = dt sum_{s<t} u_s
    let mut y = vec![DVector::zeros(d); horizon];
    for t in 1..horizon {
        y[t] = &y[t - 1] + u.rows((t - 1) * d, d) * dt;
    }
    // unknowns Y_1 .. Y_{T-1}; block Thomas elimination
    let mut factors: Vec<Cholesky<f64, nalgebra::Dyn>> = Vec::with_capacity(horizon);
    let mut rhs: Vec<DVector<f64>> = Vec::with_capacity(horizon);
    for t in 1..horizon {
        let ends = if t + 1 < horizon { 2.0 } else { 1.0 };
        let mut diag = &m[t] + DMatrix::identity(d, d) * (c * ends);
        let mut b = &m[t] * &y[t] - &v[t];
        if let (Some(prev), Some(prev_b)) = (factors.last(), rhs.last()) {
            diag -= prev.inverse() * (c * c);
            b += prev.solve(prev_b) * c;
        }
        let diag = (&diag + diag.transpose()) * 0.5;
        factors.push(Cholesky::new(diag).ok_or(Error::SingularSystem)?);
        rhs.push(b);
    }
    let mut next: Vec<DVector<f64>> = vec![DVector::zeros(d); horizon];
    for t in (1..horizon).rev() {
        let mut b = rhs[t - 1].clone();
        if t + 1 < horizon {
            b += &next[t + 1] * c;
        }
        next[t] = factors[t - 1].solve(&b);
    }
    let mut du = -u;
    for s in 0..horizon.saturating_sub(1) {
        let z = (&next[s + 1] - &next[s]) / dt;
        let mut block = du.rows_mut(s * d, d);
        block += z;
    }
    Ok(du)
}

/// Dense normal equations, assembled from suffix sums: block `(s, s')` of
/// `S_uᵀJᵀQJS_u` is `dt² Σ_{t > max(s, s')} J_tᵀQ_tJ_t`.
fn dense_step(problem: &PlanProblem, u: &DVector<f64>, lin: &Linearization) -> Result<DVector<f64>> {
    let (d, horizon, dt) = (problem.dof(), problem.horizon, problem.dt);
    let (m, v) = normal_terms(d, horizon, lin);
    let mut suffix_m = vec![DMatrix::zeros(d, d); horizon];
    let mut suffix_v = vec![DVector::zeros(d); horizon];
    for k in (0..horizon.saturating_sub(1)).rev() {
        suffix_m[k] = &suffix_m[k + 1] + &m[k + 1] * (dt * dt);
        suffix_v[k] = &suffix_v[k + 1] + &v[k + 1] * dt;
    }
    let n = d * horizon;
    let r = problem.control_weight;
    let mut h = DMatrix::zeros(n, n);
    let mut g = u * r;
    for s in 0..horizon {
        for s2 in 0..horizon {
            h.view_mut((s * d, s2 * d), (d, d)).copy_from(&suffix_m[s.max(s2)]);
        }
        let mut gs = g.rows_mut(s * d, d);
        gs += &suffix_v[s];
    }
    for i in 0..n {
        h[(i, i)] += r;
    }
    let chol = Cholesky::new(h).ok_or(Error::SingularSystem)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    if !(lo > 0.0) || lo * lo < 1e-14 * hi * hi {
        return Err(Error::SingularSystem);
    }
    Ok(-chol.solve(&g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub trajectory: JointTrajectory,
    pub cost_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Norm of the tangent residual at every timestep that has a reference.
    pub residual_norms: Vec<Option<f64>>,
    /// True when the last line search found no descent above the minimum
    /// step; the best iterate so far is returned.
    pub line_search_failed: bool,
}

impl PlanResult {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("cost history is never empty")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Solves from zero controls.
pub fn solve(problem: &PlanProblem) -> Result<PlanResult> {
    solve_from(problem, DVector::zeros(problem.dof() * problem.horizon))
}

pub fn solve_from(problem: &PlanProblem, mut u: DVector<f64>) -> Result<PlanResult> {
    problem.validate()?;
    check_controls(problem, &u)?;
    let mut cost = total_cost(problem, &u)?;
    if !cost.is_finite() {
        // surface the singular timestep
        residuals_and_jacobian(problem, &u)?;
    }
    let mut history = vec![cost];
    let mut converged = false;
    let mut line_search_failed = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let lin = residuals_and_jacobian(problem, &u)?;
        if cost <= f64::MIN_POSITIVE {
            converged = true;
            break;
        }
        let du = gauss_newton_step(problem, &u, &lin)?;
        iterations += 1;
        if du.norm() < STEP_TOLERANCE {
            converged = true;
            break;
        }
        let mut alpha = 1.0;
        let accepted = loop {
            let candidate = &u + &du * alpha;
            let c = total_cost(problem, &candidate)?;
            if c < cost {
                break Some((candidate, c));
            }
            alpha *= 0.5;
            if alpha < MIN_STEP {
                break None;
            }
        };
        let Some((next, next_cost)) = accepted else {
            line_search_failed = true;
            break;
        };
        let improvement = (cost - next_cost) / cost.abs().max(f64::MIN_POSITIVE);
        u = next;
        cost = next_cost;
        history.push(cost);
        if improvement < RELATIVE_TOLERANCE {
            converged = true;
            break;
        }
    }
    let trajectory = JointTrajectory::from_controls(&problem.q0, &u, problem.dt)?;
    let residual_norms = (0..problem.horizon)
        .map(|t| {
            problem.references[t]
                .as_ref()
                .map(|r| {
                    tangent_residual(problem, t, r, &trajectory.state(t), false)
                        .map(|(f, _)| f.norm())
                        .unwrap_or(f64::INFINITY)
                })
        })
        .collect();
    Ok(PlanResult {
        trajectory,
        cost_history: history,
        converged,
        iterations,
        residual_norms,
        line_search_failed,
    })
}

/// How the chart is chosen for each reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "chart")]
pub enum ChartStrategy {
    Fixed(ChartId),
    /// Smallest covariance determinant.
    Optimal,
}

impl std::fmt::Display for ChartStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChartStrategy::Fixed(c) => write!(f, "fixed-{c}"),
            ChartStrategy::Optimal => f.write_str("optimal"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// One reference per phase, at the last timestep the phase dominates.
    #[default]
    Viapoints,
    /// A reference at every timestep.
    Dense,
}

/// Per-timestep references drawn from a phase model.
pub fn references_from_model(
    model: &PhaseModel,
    strategy: ChartStrategy,
    mode: ReferenceMode,
) -> Result<Vec<Option<Reference>>> {
    if let ChartStrategy::Fixed(c) = strategy {
        if !model.charts.contains(&c) {
            return Err(Error::InvalidArgument(format!("chart {c} is not in the phase model")));
        }
    }
    let mut out = vec![None; model.horizon];
    match mode {
        ReferenceMode::Viapoints => {
            for (k, end) in model.phase_ends().into_iter().enumerate() {
                let Some(t) = end else { continue };
                let chart = match strategy {
                    ChartStrategy::Fixed(c) => c,
                    ChartStrategy::Optimal => model.phase_winners[k],
                };
                out[t] = Some(Reference::from_gaussian(chart, &model.phases[k][&chart]));
            }
        }
        ReferenceMode::Dense => {
            for (t, slot) in out.iter_mut().enumerate() {
                let chart = match strategy {
                    ChartStrategy::Fixed(c) => c,
                    ChartStrategy::Optimal => model.winners[t],
                };
                let g = model.reference(chart, t).expect("reference exists for every chart and timestep");
                *slot = Some(Reference::from_gaussian(chart, g));
            }
        }
    }
    Ok(out)
}
