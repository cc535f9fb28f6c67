//! Planar serial arm: forward kinematics, Jacobian and the stacked
//! single-integrator dynamics used by the batch planner.
//!
//! The stacked state is `q = [q_0; q_1; ...; q_{T-1}]` with
//! `q_{t+1} = q_t + dt * u_t`, so the first stacked state is the initial
//! configuration and the last control has no effect on the states.

use nalgebra::{DMatrix, DVector, UnitComplex, Vector2};
use serde::{Deserialize, Serialize};

use crate::charts::{CartesianPose, RigidTransform};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawArm", into = "RawArm")]
pub struct ArmModel {
    link_lengths: Vec<f64>,
    base: Vector2<f64>,
    base_angle: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArm {
    link_lengths: Vec<f64>,
    #[serde(default)]
    base: [f64; 2],
    #[serde(default)]
    base_angle: f64,
}

impl TryFrom<RawArm> for ArmModel {
    type Error = Error;

    fn try_from(raw: RawArm) -> Result<Self> {
        ArmModel::new(raw.link_lengths, RigidTransform::planar(raw.base[0], raw.base[1], raw.base_angle))
    }
}

impl From<ArmModel> for RawArm {
    fn from(arm: ArmModel) -> Self {
        RawArm {
            link_lengths: arm.link_lengths,
            base: [arm.base.x, arm.base.y],
            base_angle: arm.base_angle,
        }
    }
}

impl Default for ArmModel {
    fn default() -> Self {
        Self {
            link_lengths: vec![1.0; 3],
            base: Vector2::zeros(),
            base_angle: 0.0,
        }
    }
}

impl ArmModel {
    pub fn new(link_lengths: Vec<f64>, base: RigidTransform) -> Result<Self> {
        if link_lengths.is_empty() {
            return Err(Error::InvalidArgument("arm needs at least one link".into()));
        }
        if let Some(l) = link_lengths.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(format!("link length {l} must be positive")));
        }
        let RigidTransform::Planar { translation, rotation } = base else {
            return Err(Error::InvalidArgument("planar arm needs a planar base pose".into()));
        };
        Ok(Self {
            link_lengths,
            base: translation,
            base_angle: rotation.angle(),
        })
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn link_lengths(&self) -> &[f64] {
        &self.link_lengths
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn base(&self) -> RigidTransform {
        RigidTransform::planar(self.base.x, self.base.y, self.base_angle)
    }

    fn check(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                found: q.len(),
            });
        }
        Ok(())
    }

    /// World positions of the base and of every joint after it, ending at the
    /// end effector. Used for drawing.
    pub fn joint_positions(&self, q: &DVector<f64>) -> Result<Vec<Vector2<f64>>> {
        self.check(q)?;
        let mut out = Vec::with_capacity(self.dof() + 1);
        let mut p = self.base;
        let mut angle = self.base_angle;
        out.push(p);
        for (l, qi) in self.link_lengths.iter().zip(q.iter()) {
            angle += qi;
            p += Vector2::new(angle.cos(), angle.sin()) * *l;
            out.push(p);
        }
        Ok(out)
    }
}

pub fn forward_kinematics(arm: &ArmModel, q: &DVector<f64>) -> Result<CartesianPose> {
    let joints = arm.joint_positions(q)?;
    let heading = arm.base_angle + q.sum();
    Ok(CartesianPose::Planar {
        position: *joints.last().expect("arm has links"),
        heading: UnitComplex::new(heading),
    })
}

/// Rows are `d x / dq`, `d y / dq` and `d heading / dq`.
pub fn kinematic_jacobian(arm: &ArmModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    arm.check(q)?;
    let d = arm.dof();
    let mut cum = Vec::with_capacity(d);
    let mut angle = arm.base_angle;
    for qi in q.iter() {
        angle += qi;
        cum.push(angle);
    }
    let mut jac = DMatrix::zeros(3, d);
    for i in 0..d {
        for j in i..d {
            let l = arm.link_lengths[j];
            jac[(0, i)] -= l * cum[j].sin();
            jac[(1, i)] += l * cum[j].cos();
        }
        jac[(2, i)] = 1.0;
    }
    Ok(jac)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Elbow {
    Up,
    Down,
}

/// Closed-form inverse kinematics of a three-link arm for a planar pose.
/// Returns `None` when the wrist point is out of reach.
pub fn inverse_kinematics(arm: &ArmModel, pose: &CartesianPose, elbow: Elbow) -> Result<Option<DVector<f64>>> {
    if arm.dof() != 3 {
        return Err(Error::InvalidArgument("closed-form inverse kinematics needs three links".into()));
    }
    let local = arm.base().to_local(pose)?;
    let CartesianPose::Planar { position, heading } = local else {
        unreachable!("planar base only maps planar poses")
    };
    let [l1, l2, l3] = [arm.link_lengths[0], arm.link_lengths[1], arm.link_lengths[2]];
    let phi = heading.angle();
    let wrist = position - Vector2::new(phi.cos(), phi.sin()) * l3;
    let c2 = (wrist.norm_squared() - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(-1.0..=1.0).contains(&c2) {
        return Ok(None);
    }
    let q2 = match elbow {
        Elbow::Up => c2.acos(),
        Elbow::Down => -c2.acos(),
    };
    let q1 = wrist.y.atan2(wrist.x) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    let q3 = phi - q1 - q2;
    Ok(Some(DVector::from_vec(vec![q1, q2, q3])))
}

/// Stacked dynamics `q = S_q q_0 + S_u u` over `horizon` steps.
pub fn batch_dynamics(dof: usize, horizon: usize, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if dof == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("dof and horizon must be positive".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let n = dof * horizon;
    let sq = DMatrix::from_fn(n, dof, |i, j| if i % dof == j { 1.0 } else { 0.0 });
    let su = DMatrix::from_fn(n, n, |i, j| {
        let (t, a) = (i / dof, i % dof);
        let (s, b) = (j / dof, j % dof);
        if a == b && s < t {
            dt
        } else {
            0.0
        }
    });
    Ok((sq, su))
}

/// Step-by-step integration of stacked controls; returns a `horizon x dof`
/// matrix of states.
pub fn rollout(q0: &DVector<f64>, controls: &DVector<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let d = q0.len();
    if d == 0 || controls.len() % d != 0 || controls.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: controls.len(),
        });
    }
    let horizon = controls.len() / d;
    let mut states = DMatrix::zeros(horizon, d);
    let mut q = q0.clone();
    for t in 0..horizon {
        states.set_row(t, &q.transpose());
        for a in 0..d {
            q[a] += dt * controls[t * d + a];
        }
    }
    Ok(states)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory", into = "RawTrajectory")]
pub struct JointTrajectory {
    pub dt: f64,
    /// `T x D` joint angles.
    pub states: DMatrix<f64>,
    /// `T x D` joint velocities.
    pub controls: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTrajectory {
    dt: f64,
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
}

impl TryFrom<RawTrajectory> for JointTrajectory {
    type Error = Error;

    fn try_from(raw: RawTrajectory) -> Result<Self> {
        let to_matrix = |rows: &[Vec<f64>]| -> Result<DMatrix<f64>> {
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(Error::Schema("ragged trajectory rows".into()));
            }
            Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
        };
        let states = to_matrix(&raw.states)?;
        let controls = to_matrix(&raw.controls)?;
        if states.shape() != controls.shape() {
            return Err(Error::Schema("states and controls differ in shape".into()));
        }
        Ok(JointTrajectory {
            dt: raw.dt,
            states,
            controls,
        })
    }
}

impl From<JointTrajectory> for RawTrajectory {
    fn from(t: JointTrajectory) -> Self {
        RawTrajectory {
            dt: t.dt,
            states: crate::stats::matrix_rows(&t.states),
            controls: crate::stats::matrix_rows(&t.controls),
        }
    }
}

impl JointTrajectory {
    pub fn from_controls(q0: &DVector<f64>, controls: &DVector<f64>, dt: f64) -> Result<Self> {
        let states = rollout(q0, controls, dt)?;
        let d = q0.len();
        let controls = DMatrix::from_row_slice(states.nrows(), d, controls.as_slice());
        Ok(Self { dt, states, controls })
    }

    pub fn horizon(&self) -> usize {
        self.states.nrows()
    }

    pub fn state(&self, t: usize) -> DVector<f64> {
        self.states.row(t).transpose()
    }
}
