//! Synthetic demonstrations for planar grasping, planar box opening and
//! spatial grasp-pose sets, plus the trial harness that plans from random
//! initial arm states and scores the reproductions.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DVector, UnitQuaternion, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::charts::{CartesianPose, ChartId, RigidTransform, Space};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kinematics::{forward_kinematics, inverse_kinematics, ArmModel, Elbow};
use crate::phase::{
    build_phase_model_with, fit_time_gmm, CovarianceBlend, Demonstration, PhaseModel, PhaseModelConfig,
    PhaseWeighting, Regression, TimeGmm,
};
use crate::planner::{references_from_model, solve, ChartStrategy, PlanProblem, PlanResult, ReferenceMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(rename = "grasp2d")]
    Grasp2D,
    #[serde(rename = "box_open2d")]
    BoxOpen2D,
    #[serde(rename = "grasp_pose3d")]
    GraspPose3D,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Grasp2D => "grasp2d",
            TaskKind::BoxOpen2D => "box_open2d",
            TaskKind::GraspPose3D => "grasp_pose3d",
        })
    }
}

/// Shape of a spatial grasp-pose set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    /// Approach from around a vertical axis at a fixed distance from it.
    Cylindrical,
    /// Approach from a cap of directions at a fixed distance from a point.
    Spherical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessThresholds {
    /// Grasp: allowed final radius error (m).
    pub radius_tolerance: f64,
    /// Grasp: allowed heading error to the object (degrees).
    pub heading_tolerance_deg: f64,
    /// Box: allowed relative radius deviation over the active arc.
    pub radius_deviation: f64,
    /// Box: required fraction of the demonstrated sweep.
    pub sweep_fraction: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            radius_tolerance: 0.05,
            heading_tolerance_deg: 10.0,
            radius_deviation: 0.02,
            sweep_fraction: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanningSettings {
    pub arm: ArmModel,
    pub control_weight: f64,
    pub activation_start: usize,
    pub reference_mode: ReferenceMode,
    pub weighting: PhaseWeighting,
    pub regression: Regression,
    pub covariance_blend: CovarianceBlend,
    pub trials: usize,
    /// Lower bound on the per-joint standard deviation of sampled initial
    /// states (rad).
    pub initial_joint_std_floor: f64,
}

impl Default for PlanningSettings {
    fn default() -> Self {
        Self {
            arm: ArmModel::default(),
            control_weight: crate::planner::DEFAULT_CONTROL_WEIGHT,
            activation_start: crate::planner::DEFAULT_ACTIVATION_START,
            reference_mode: ReferenceMode::Dense,
            weighting: PhaseWeighting::Hard,
            regression: Regression::Blend,
            covariance_blend: CovarianceBlend::Moment,
            trials: 50,
            initial_joint_std_floor: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub object_frame: RigidTransform,
    pub phases: usize,
    pub demos: usize,
    pub horizon: usize,
    pub dt: f64,
    /// Grasp: distance to the object in each phase. Box: `[radius]`.
    pub phase_radii: Vec<f64>,
    /// Radial jitter (m).
    pub radial_noise: f64,
    /// Grasp: full azimuth range of approach directions. Box: swept angle.
    /// Spherical sets: half-angle of the cap of directions (rad).
    pub angular_spread: f64,
    /// Orientation jitter (rad).
    pub orientation_noise: f64,
    /// Cylindrical sets: full range of approach heights (m).
    pub height_spread: f64,
    pub symmetry: Option<Symmetry>,
    pub seed: u64,
    pub thresholds: SuccessThresholds,
    pub planning: PlanningSettings,
}

impl TaskSpec {
    pub fn grasp2d() -> Self {
        Self {
            kind: TaskKind::Grasp2D,
            // local x points back at the arm base
            object_frame: RigidTransform::planar(2.0, 0.0, PI),
            phases: 3,
            demos: 6,
            horizon: 100,
            dt: 0.01,
            phase_radii: vec![1.5, 0.8, 0.2],
            radial_noise: 2e-3,
            angular_spread: PI,
            orientation_noise: 0.02,
            height_spread: 0.0,
            symmetry: None,
            seed: 0,
            thresholds: SuccessThresholds::default(),
            planning: PlanningSettings::default(),
        }
    }

    pub fn box_open2d() -> Self {
        Self {
            kind: TaskKind::BoxOpen2D,
            object_frame: RigidTransform::planar(1.5, 0.0, 0.0),
            phases: 3,
            demos: 1,
            horizon: 100,
            dt: 0.01,
            phase_radii: vec![0.3],
            radial_noise: 5e-5,
            angular_spread: FRAC_PI_2,
            orientation_noise: 1e-3,
            height_spread: 0.0,
            symmetry: None,
            seed: 0,
            thresholds: SuccessThresholds::default(),
            planning: PlanningSettings::default(),
        }
    }

    pub fn grasp_pose3d(symmetry: Symmetry) -> Self {
        let (radii, spread) = match symmetry {
            Symmetry::Cylindrical => (vec![0.8, 0.6, 0.4, 0.2], FRAC_PI_2),
            Symmetry::Spherical => (vec![0.8, 0.6, 0.45, 0.3], PI / 3.0),
        };
        Self {
            kind: TaskKind::GraspPose3D,
            object_frame: RigidTransform::spatial(
                Vector3::new(0.5, 0.1, 0.2),
                UnitQuaternion::from_euler_angles(0.0, 0.0, 0.3),
            ),
            phases: 4,
            demos: 6,
            horizon: 100,
            dt: 0.01,
            phase_radii: radii,
            radial_noise: 1e-3,
            angular_spread: spread,
            orientation_noise: 0.02,
            height_spread: 0.2,
            symmetry: Some(symmetry),
            seed: 0,
            thresholds: SuccessThresholds::default(),
            planning: PlanningSettings::default(),
        }
    }

    pub fn defaults(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Grasp2D => Self::grasp2d(),
            TaskKind::BoxOpen2D => Self::box_open2d(),
            TaskKind::GraspPose3D => Self::grasp_pose3d(Symmetry::Cylindrical),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn space(&self) -> Space {
        match self.kind {
            TaskKind::GraspPose3D => Space::ThreeD,
            _ => Space::TwoD,
        }
    }

    pub fn charts(&self) -> Vec<ChartId> {
        ChartId::all(self.space())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if self.demos == 0 || self.phases == 0 || self.horizon < 2 {
            return bad("demos, phases and horizon must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        for v in [self.radial_noise, self.angular_spread, self.orientation_noise, self.height_spread] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad("noise levels and spreads must be non-negative");
            }
        }
        if self.phase_radii.iter().any(|r| !(*r > 0.0)) {
            return bad("radii must be positive");
        }
        if self.object_frame.space() != self.space() {
            return bad("object frame does not match the task space");
        }
        match self.kind {
            TaskKind::Grasp2D if self.phase_radii.len() != self.phases => bad("need one radius per phase"),
            TaskKind::BoxOpen2D if self.phase_radii.len() != 1 => bad("box opening takes a single radius"),
            TaskKind::GraspPose3D if self.phase_radii.len() != self.phases => bad("need one radius per phase"),
            TaskKind::GraspPose3D if self.symmetry.is_none() => bad("grasp-pose sets need a symmetry"),
            _ => Ok(()),
        }
    }

    pub fn phase_config(&self) -> PhaseModelConfig {
        PhaseModelConfig {
            horizon: self.horizon,
            weighting: self.planning.weighting,
            regression: self.planning.regression,
            covariance_blend: self.planning.covariance_blend,
            characteristic_lengths: None,
        }
    }

    fn phase_of(&self, t: usize) -> usize {
        (t * self.phases / self.horizon).min(self.phases - 1)
    }
}

/// Minimum-jerk blend from 0 to 1.
fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Fraction of a box demonstration spent sweeping; the lid is then held open.
const BOX_SWEEP_END: f64 = 0.85;

/// Local angle of the box-opening arc at normalized time `s`.
fn box_angle(spec: &TaskSpec, s: f64) -> f64 {
    box_start_angle(spec) - spec.angular_spread * min_jerk(s / BOX_SWEEP_END)
}

fn box_start_angle(spec: &TaskSpec) -> f64 {
    FRAC_PI_2 + spec.angular_spread / 2.0
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("non-negative standard deviation")
}

/// Generates demonstrations, deterministic for a given spec.
pub fn generate_demos(spec: &TaskSpec) -> Result<Vec<Demonstration>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radial = normal(spec.radial_noise);
    let angular = normal(spec.orientation_noise);
    let n = spec.demos;
    // second coordinate strata, decoupled from the first
    let mut strata: Vec<usize> = (0..n).collect();
    if spec.kind == TaskKind::GraspPose3D {
        strata.shuffle(&mut rng);
    }
    (0..n)
        .map(|i| {
            // stratified so every demo set covers the whole range
            let u = (i as f64 + rng.random::<f64>()) / n as f64;
            let frames = match spec.kind {
                TaskKind::Grasp2D => {
                    let phi = spec.angular_spread * (u - 0.5);
                    (0..spec.horizon)
                        .map(|t| {
                            let r = spec.phase_radii[spec.phase_of(t)] + radial.sample(&mut rng);
                            let heading = phi + PI + angular.sample(&mut rng);
                            (t, CartesianPose::planar(r * phi.cos(), r * phi.sin(), heading))
                        })
                        .collect::<Vec<_>>()
                }
                TaskKind::BoxOpen2D => {
                    let r0 = spec.phase_radii[0];
                    (0..spec.horizon)
                        .map(|t| {
                            let s = t as f64 / (spec.horizon - 1) as f64;
                            let theta = box_angle(spec, s);
                            let r = r0 + radial.sample(&mut rng);
                            let heading = theta - FRAC_PI_2 + angular.sample(&mut rng);
                            (t, CartesianPose::planar(r * theta.cos(), r * theta.sin(), heading))
                        })
                        .collect()
                }
                TaskKind::GraspPose3D => {
                    let v = (strata[i] as f64 + rng.random::<f64>()) / n as f64;
                    grasp_pose_frames(spec, u, v, &mut rng, &radial, &angular)
                }
            };
            let frames = frames
                .into_iter()
                .map(|(t, local)| Ok((t, spec.object_frame.to_world(&local)?)))
                .collect::<Result<Vec<_>>>()?;
            Demonstration::new(format!("demo-{i}"), spec.dt, frames, spec.object_frame)
        })
        .collect()
}

fn small_rotation(rng: &mut ChaCha8Rng, angular: &Normal<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(Vector3::new(
        angular.sample(rng),
        angular.sample(rng),
        angular.sample(rng),
    ))
}

fn grasp_pose_frames(
    spec: &TaskSpec,
    u: f64,
    v: f64,
    rng: &mut ChaCha8Rng,
    radial: &Normal<f64>,
    angular: &Normal<f64>,
) -> Vec<(usize, CartesianPose)> {
    // gripper approach axis (local z) pointing at the object
    let grip = UnitQuaternion::from_euler_angles(0.0, PI, 0.0);
    (0..spec.horizon)
        .map(|t| {
            let r = spec.phase_radii[spec.phase_of(t)] + radial.sample(rng);
            let pose = match spec.symmetry.unwrap_or(Symmetry::Cylindrical) {
                Symmetry::Cylindrical => {
                    let theta = spec.angular_spread * (u - 0.5);
                    let z = spec.height_spread * (v - 0.5);
                    let frame = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta);
                    // approach horizontally toward the axis
                    let side = UnitQuaternion::from_euler_angles(0.0, -FRAC_PI_2, 0.0) * grip;
                    CartesianPose::spatial(
                        Vector3::new(r * theta.cos(), r * theta.sin(), z),
                        small_rotation(rng, angular) * frame * side,
                    )
                }
                Symmetry::Spherical => {
                    // area-uniform over the cap
                    let cos_max = spec.angular_spread.cos();
                    let polar = (1.0 - v * (1.0 - cos_max)).acos();
                    let azimuth = 2.0 * PI * u;
                    let n = Vector3::new(polar.sin() * azimuth.cos(), polar.sin() * azimuth.sin(), polar.cos());
                    let frame = UnitQuaternion::rotation_between(&Vector3::z(), &n).unwrap_or_else(UnitQuaternion::identity);
                    CartesianPose::spatial(n * r, small_rotation(rng, angular) * frame * grip)
                }
            };
            (t, pose)
        })
        .collect()
}

/// Demonstrations together with their phase model.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub spec: TaskSpec,
    pub demos: Vec<Demonstration>,
    pub gmm: TimeGmm,
    pub model: PhaseModel,
}

pub fn prepare(spec: &TaskSpec, exec: Execution) -> Result<PreparedTask> {
    prepare_with_charts(spec, &spec.charts(), exec)
}

/// Like [`prepare`], restricted to a subset of the task's charts.
pub fn prepare_with_charts(spec: &TaskSpec, charts: &[ChartId], exec: Execution) -> Result<PreparedTask> {
    if let Some(c) = charts.iter().find(|c| c.space() != spec.space()) {
        return Err(Error::InvalidArgument(format!("chart {c} does not belong to the task space")));
    }
    let demos = generate_demos(spec)?;
    let gmm = fit_time_gmm(&demos, spec.phases, spec.seed, spec.horizon)?;
    let model = build_phase_model_with(&demos, &gmm, charts, &spec.phase_config(), exec)?;
    Ok(PreparedTask {
        spec: spec.clone(),
        demos,
        gmm,
        model,
    })
}

/// Joint configuration reaching `pose`, pulling the wrist back into reach
/// when the pose itself is out of reach.
fn reachable_ik(arm: &ArmModel, pose: &CartesianPose) -> Result<Option<DVector<f64>>> {
    if let Some(q) = inverse_kinematics(arm, pose, Elbow::Up)? {
        return Ok(Some(q));
    }
    let CartesianPose::Planar { position, heading } = *pose else {
        return Ok(None);
    };
    let l = arm.link_lengths();
    if l.len() != 3 {
        return Ok(None);
    }
    let base = arm.base();
    let RigidTransform::Planar { translation, .. } = base else { unreachable!() };
    let tip = Vector2::new(heading.re, heading.im) * l[2];
    let wrist = position - tip - translation;
    let limit = 0.98 * (l[0] + l[1]);
    let wrist = wrist * (limit / wrist.norm());
    let moved = CartesianPose::Planar {
        position: translation + wrist + tip,
        heading,
    };
    inverse_kinematics(arm, &moved, Elbow::Up)
}

/// Mean and per-joint standard deviation of the demonstrated initial
/// configurations.
pub fn initial_state_distribution(task: &PreparedTask) -> Result<(DVector<f64>, DVector<f64>)> {
    let arm = &task.spec.planning.arm;
    let mut qs = Vec::new();
    for demo in &task.demos {
        if let Some(q) = reachable_ik(arm, &demo.frames()[0].1)? {
            qs.push(q);
        }
    }
    if qs.is_empty() {
        return Err(Error::InsufficientData("no demonstrated initial pose is reachable".into()));
    }
    let n = qs.len() as f64;
    let mean = qs.iter().fold(DVector::zeros(arm.dof()), |acc, q| acc + q) / n;
    let var = qs
        .iter()
        .fold(DVector::zeros(arm.dof()), |acc, q| acc + (q - &mean).map(|v| v * v))
        / n;
    let floor = task.spec.planning.initial_joint_std_floor;
    Ok((mean, var.map(|v| v.sqrt().max(floor))))
}

/// Initial states of every trial, deterministic for the task seed.
pub fn sample_initial_states(task: &PreparedTask, count: usize) -> Result<Vec<DVector<f64>>> {
    let (mean, std) = initial_state_distribution(task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.spec.seed);
    rng.set_stream(1);
    Ok((0..count)
        .map(|_| DVector::from_fn(mean.len(), |i, _| mean[i] + std[i] * normal(1.0).sample(&mut rng)))
        .collect())
}

pub fn plan_problem(task: &PreparedTask, q0: DVector<f64>, strategy: ChartStrategy) -> Result<PlanProblem> {
    let references = references_from_model(&task.model, strategy, task.spec.planning.reference_mode)?;
    let mut problem = PlanProblem::new(
        task.spec.planning.arm.clone(),
        q0,
        task.spec.dt,
        task.spec.object_frame,
        references,
    );
    problem.control_weight = task.spec.planning.control_weight;
    problem.activation_start = task.spec.planning.activation_start;
    Ok(problem)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub success: bool,
    /// Names of the violated thresholds, comma separated.
    pub reason: Option<String>,
    /// Grasp: final radius error (m). Box: largest relative radius deviation.
    pub radius_error: f64,
    /// Grasp: final heading error (deg). Box: unused.
    pub heading_error_deg: f64,
    /// Box: swept fraction of the demonstrated angle.
    pub sweep_fraction: f64,
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Scores a plan against the task's success thresholds.
pub fn evaluate_trial(plan: &PlanResult, spec: &TaskSpec) -> Result<Evaluation> {
    let horizon = plan.trajectory.horizon();
    if horizon != spec.horizon {
        return Err(Error::HorizonMismatch {
            expected: spec.horizon,
            found: horizon,
        });
    }
    let arm = &spec.planning.arm;
    let local = |t: usize| -> Result<(Vector2<f64>, f64)> {
        let pose = spec.object_frame.to_local(&forward_kinematics(arm, &plan.trajectory.state(t))?)?;
        match pose {
            CartesianPose::Planar { position, heading } => Ok((position, heading.angle())),
            CartesianPose::Spatial { .. } => Err(Error::InvalidArgument("planar task expected".into())),
        }
    };
    let th = &spec.thresholds;
    let mut reasons = Vec::new();
    let mut eval = Evaluation {
        success: false,
        reason: None,
        radius_error: 0.0,
        heading_error_deg: 0.0,
        sweep_fraction: 0.0,
    };
    match spec.kind {
        TaskKind::Grasp2D => {
            let (p, heading) = local(horizon - 1)?;
            let target = *spec.phase_radii.last().expect("validated");
            eval.radius_error = (p.norm() - target).abs();
            let toward = (-p.y).atan2(-p.x);
            eval.heading_error_deg = wrap(heading - toward).abs().to_degrees();
            if eval.radius_error > th.radius_tolerance {
                reasons.push("radius");
            }
            if eval.heading_error_deg > th.heading_tolerance_deg {
                reasons.push("heading");
            }
        }
        TaskKind::BoxOpen2D => {
            let r0 = spec.phase_radii[0];
            for t in spec.planning.activation_start.min(horizon - 1)..horizon {
                let (p, _) = local(t)?;
                eval.radius_error = eval.radius_error.max((p.norm() - r0).abs() / r0);
            }
            let (p, _) = local(horizon - 1)?;
            let swept = wrap(box_start_angle(spec) - p.y.atan2(p.x));
            eval.sweep_fraction = swept / spec.angular_spread;
            if eval.radius_error > th.radius_deviation {
                reasons.push("radius");
            }
            if eval.sweep_fraction < th.sweep_fraction {
                reasons.push("sweep");
            }
        }
        TaskKind::GraspPose3D => {
            return Err(Error::InvalidArgument("spatial grasp-pose sets are not planned".into()));
        }
    }
    eval.success = reasons.is_empty();
    eval.reason = (!reasons.is_empty()).then(|| reasons.join(", "));
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub index: usize,
    pub initial_state: Vec<f64>,
    /// Chart used in each phase.
    pub phase_charts: Vec<ChartId>,
    pub success: bool,
    pub reason: Option<String>,
    pub evaluation: Evaluation,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    /// Whether the cost history never increased.
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub task: TaskKind,
    pub strategy: ChartStrategy,
    pub successes: usize,
    pub total: usize,
    pub trials: Vec<TrialOutcome>,
}

impl TrialReport {
    pub fn success_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.successes as f64 / self.total as f64
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per trial.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,trial,success,reason,radius_error,heading_error_deg,sweep_fraction,final_cost,iterations,converged,monotone,phase_charts,initial_state\n",
        );
        for t in &self.trials {
            let charts: Vec<&str> = t.phase_charts.iter().map(|c| c.name()).collect();
            let q0: Vec<String> = t.initial_state.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                self.strategy,
                t.index,
                t.success,
                t.reason.as_deref().unwrap_or(""),
                t.evaluation.radius_error,
                t.evaluation.heading_error_deg,
                t.evaluation.sweep_fraction,
                t.final_cost,
                t.iterations,
                t.converged,
                t.monotone,
                charts.join(";"),
                q0.join(";"),
            ));
        }
        out
    }
}

/// Plans and scores one trial.
pub fn run_trial(task: &PreparedTask, index: usize, q0: &DVector<f64>, strategy: ChartStrategy) -> Result<(PlanResult, TrialOutcome)> {
    let wrap_err = |e: Error| Error::Trial {
        index,
        source: Box::new(e),
    };
    let problem = plan_problem(task, q0.clone(), strategy).map_err(wrap_err)?;
    let plan = solve(&problem).map_err(wrap_err)?;
    let evaluation = evaluate_trial(&plan, &task.spec).map_err(wrap_err)?;
    let phase_charts = match strategy {
        ChartStrategy::Fixed(c) => vec![c; task.model.phase_count()],
        ChartStrategy::Optimal => task.model.phase_winners.clone(),
    };
    let outcome = TrialOutcome {
        index,
        initial_state: q0.iter().copied().collect(),
        phase_charts,
        success: evaluation.success,
        reason: evaluation.reason.clone(),
        final_cost: plan.final_cost(),
        iterations: plan.iterations,
        converged: plan.converged,
        line_search_failed: plan.line_search_failed,
        monotone: plan.cost_history.windows(2).all(|w| w[1] <= w[0]),
        evaluation,
    };
    Ok((plan, outcome))
}

/// Runs `spec.planning.trials` trials of one strategy on a prepared task.
pub fn run_prepared(task: &PreparedTask, strategy: ChartStrategy, exec: Execution) -> Result<TrialReport> {
    if task.spec.kind == TaskKind::GraspPose3D {
        return Err(Error::InvalidArgument("spatial grasp-pose sets are not planned".into()));
    }
    let count = task.spec.planning.trials;
    if count == 0 {
        return Err(Error::InvalidArgument("trial count must be at least 1".into()));
    }
    let states = sample_initial_states(task, count)?;
    let outcomes = exec.map_range(count, |i| run_trial(task, i, &states[i], strategy).map(|(_, o)| o));
    let mut trials = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    trials.sort_by_key(|t| t.index);
    Ok(TrialReport {
        task: task.spec.kind,
        strategy,
        successes: trials.iter().filter(|t| t.success).count(),
        total: trials.len(),
        trials,
    })
}

/// Generates demonstrations, fits the phase model and runs the trials.
pub fn run_experiment(spec: &TaskSpec, strategy: ChartStrategy, exec: Execution) -> Result<TrialReport> {
    let task = prepare(spec, exec)?;
    run_prepared(&task, strategy, exec)
}
