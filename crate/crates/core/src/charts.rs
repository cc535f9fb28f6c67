//! Coordinate-system charts for end-effector poses.
//!
//! Every chart maps a Cartesian pose, expressed in an object frame, onto a
//! product manifold made of a position part and an orientation part. The
//! orientation is re-expressed in a local base frame that follows the shape
//! of the chart:
//!
//! | chart        | position      | orientation | local base frame                      |
//! |--------------|---------------|-------------|---------------------------------------|
//! | cartesian-2d | `R^2`         | `S^1`       | object frame                          |
//! | polar        | `S^1 x R^1`   | `S^1`       | rotated by the azimuth                |
//! | cartesian-3d | `R^3`         | `S^3`       | object frame                          |
//! | cylindrical  | `S^1 x R^2`   | `S^3`       | rotated by the azimuth about `z`      |
//! | spherical    | `S^2 x R^1`   | `S^3`       | minimal rotation taking `z` to radial |
//!
//! Angles are unit vectors on spheres, quaternions are `[w, x, y, z]`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitComplex, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{ManifoldPoint, ManifoldSpec};

/// Planar radius below which polar, cylindrical and spherical charts are undefined.
pub const ORIGIN_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    TwoD,
    ThreeD,
}

impl Space {
    pub fn chart_count(self) -> u8 {
        match self {
            Space::TwoD => 2,
            Space::ThreeD => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Space::TwoD => "2d",
            Space::ThreeD => "3d",
        }
    }
}

/// Identifies chart `n` of the dictionary for a space. Ordering follows
/// `(space, index)`, so the lowest index wins ties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChartId {
    space: Space,
    index: u8,
}

impl ChartId {
    pub const CARTESIAN_2D: ChartId = ChartId { space: Space::TwoD, index: 1 };
    pub const POLAR: ChartId = ChartId { space: Space::TwoD, index: 2 };
    pub const CARTESIAN_3D: ChartId = ChartId { space: Space::ThreeD, index: 1 };
    pub const CYLINDRICAL: ChartId = ChartId { space: Space::ThreeD, index: 2 };
    pub const SPHERICAL: ChartId = ChartId { space: Space::ThreeD, index: 3 };

    pub fn new(space: Space, index: u8) -> Result<Self> {
        if index == 0 || index > space.chart_count() {
            return Err(Error::InvalidChart {
                space: space.name(),
                index,
            });
        }
        Ok(Self { space, index })
    }

    /// All charts of the dictionary for `space`, in index order.
    pub fn all(space: Space) -> Vec<ChartId> {
        (1..=space.chart_count())
            .map(|index| ChartId { space, index })
            .collect()
    }

    pub fn space(self) -> Space {
        self.space
    }

    pub fn index(self) -> u8 {
        self.index
    }

    pub fn name(self) -> &'static str {
        match (self.space, self.index) {
            (Space::TwoD, 1) => "cartesian-2d",
            (Space::TwoD, _) => "polar",
            (Space::ThreeD, 1) => "cartesian-3d",
            (Space::ThreeD, 2) => "cylindrical",
            (Space::ThreeD, _) => "spherical",
        }
    }

    pub fn position_spec(self) -> ManifoldSpec {
        use ManifoldSpec::*;
        match (self.space, self.index) {
            (Space::TwoD, 1) => Euclidean(2),
            (Space::TwoD, _) => Product(vec![Sphere(1), Euclidean(1)]),
            (Space::ThreeD, 1) => Euclidean(3),
            (Space::ThreeD, 2) => Product(vec![Sphere(1), Euclidean(2)]),
            (Space::ThreeD, _) => Product(vec![Sphere(2), Euclidean(1)]),
        }
    }

    pub fn orientation_spec(self) -> ManifoldSpec {
        match self.space {
            Space::TwoD => ManifoldSpec::Sphere(1),
            Space::ThreeD => ManifoldSpec::Sphere(3),
        }
    }

    /// The full pose manifold, position factors followed by the orientation factor.
    pub fn spec(self) -> ManifoldSpec {
        let mut parts = match self.position_spec() {
            ManifoldSpec::Product(parts) => parts,
            leaf => vec![leaf],
        };
        parts.push(self.orientation_spec());
        ManifoldSpec::Product(parts)
    }

    /// Tangent dimension of the Cartesian pose this chart reads: 3 in the
    /// plane (x, y, heading) and 6 in space (position, angular velocity).
    pub fn pose_tangent_dim(self) -> usize {
        match self.space {
            Space::TwoD => 3,
            Space::ThreeD => 6,
        }
    }
}

impl fmt::Display for ChartId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChartId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartesian-2d" => Ok(ChartId::CARTESIAN_2D),
            "polar" => Ok(ChartId::POLAR),
            "cartesian-3d" => Ok(ChartId::CARTESIAN_3D),
            "cylindrical" => Ok(ChartId::CYLINDRICAL),
            "spherical" => Ok(ChartId::SPHERICAL),
            other => Err(Error::InvalidArgument(format!("unknown chart `{other}`"))),
        }
    }
}

impl Serialize for ChartId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ChartId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A world-frame end-effector pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CartesianPose {
    Planar {
        position: Vector2<f64>,
        heading: UnitComplex<f64>,
    },
    Spatial {
        position: Vector3<f64>,
        orientation: UnitQuaternion<f64>,
    },
}

impl CartesianPose {
    pub fn planar(x: f64, y: f64, heading: f64) -> Self {
        CartesianPose::Planar {
            position: Vector2::new(x, y),
            heading: UnitComplex::new(heading),
        }
    }

    pub fn spatial(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        CartesianPose::Spatial {
            position,
            orientation,
        }
    }

    pub fn space(&self) -> Space {
        match self {
            CartesianPose::Planar { .. } => Space::TwoD,
            CartesianPose::Spatial { .. } => Space::ThreeD,
        }
    }

    pub fn position(&self) -> DVector<f64> {
        match self {
            CartesianPose::Planar { position, .. } => DVector::from_column_slice(position.as_slice()),
            CartesianPose::Spatial { position, .. } => DVector::from_column_slice(position.as_slice()),
        }
    }

    /// Heading angle of a planar pose.
    pub fn heading(&self) -> Option<f64> {
        match self {
            CartesianPose::Planar { heading, .. } => Some(heading.angle()),
            CartesianPose::Spatial { .. } => None,
        }
    }

    /// Applies a small displacement in the pose tangent space: translation
    /// plus heading change in the plane, translation plus world-frame
    /// rotation vector in space.
    pub fn perturbed(&self, delta: &[f64]) -> Self {
        match *self {
            CartesianPose::Planar { position, heading } => CartesianPose::Planar {
                position: position + Vector2::new(delta[0], delta[1]),
                heading: UnitComplex::new(delta[2]) * heading,
            },
            CartesianPose::Spatial {
                position,
                orientation,
            } => CartesianPose::Spatial {
                position: position + Vector3::new(delta[0], delta[1], delta[2]),
                orientation: UnitQuaternion::from_scaled_axis(Vector3::new(delta[3], delta[4], delta[5]))
                    * orientation,
            },
        }
    }
}

/// Pose of an object frame in the world.
///
/// Serialized as `{"translation": [x, y], "heading": a}` in the plane and
/// `{"translation": [x, y, z], "rotation": [w, x, y, z]}` in space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransform", into = "RawTransform")]
pub enum RigidTransform {
    Planar {
        translation: Vector2<f64>,
        rotation: UnitComplex<f64>,
    },
    Spatial {
        translation: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransform {
    translation: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heading: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<[f64; 4]>,
}

impl TryFrom<RawTransform> for RigidTransform {
    type Error = Error;

    fn try_from(raw: RawTransform) -> Result<Self> {
        match (raw.translation.as_slice(), raw.heading, raw.rotation) {
            (&[x, y], heading, None) => Ok(RigidTransform::planar(x, y, heading.unwrap_or(0.0))),
            (&[x, y, z], None, rotation) => {
                let q = rotation.unwrap_or([1.0, 0.0, 0.0, 0.0]);
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidPoint(format!("rotation quaternion has norm {norm}")));
                }
                // stored quaternions are already unit; renormalizing would drift by an ulp
                let rotation = if (norm - 1.0).abs() < 1e-12 {
                    UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3]))
                } else {
                    unit_quat(&q)
                };
                Ok(RigidTransform::spatial(Vector3::new(x, y, z), rotation))
            }
            _ => Err(Error::Schema(
                "frame needs a 2D translation with `heading` or a 3D translation with `rotation`".into(),
            )),
        }
    }
}

impl From<RigidTransform> for RawTransform {
    fn from(t: RigidTransform) -> Self {
        match t {
            RigidTransform::Planar { translation, rotation } => RawTransform {
                translation: vec![translation.x, translation.y],
                heading: Some(rotation.angle()),
                rotation: None,
            },
            RigidTransform::Spatial { translation, rotation } => RawTransform {
                translation: vec![translation.x, translation.y, translation.z],
                heading: None,
                rotation: Some(quat_array(&rotation)),
            },
        }
    }
}

impl RigidTransform {
    pub fn planar(x: f64, y: f64, heading: f64) -> Self {
        RigidTransform::Planar {
            translation: Vector2::new(x, y),
            rotation: UnitComplex::new(heading),
        }
    }

    pub fn spatial(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        RigidTransform::Spatial {
            translation,
            rotation,
        }
    }

    pub fn identity(space: Space) -> Self {
        match space {
            Space::TwoD => Self::planar(0.0, 0.0, 0.0),
            Space::ThreeD => Self::spatial(Vector3::zeros(), UnitQuaternion::identity()),
        }
    }

    pub fn space(&self) -> Space {
        match self {
            RigidTransform::Planar { .. } => Space::TwoD,
            RigidTransform::Spatial { .. } => Space::ThreeD,
        }
    }

    /// Expresses a world pose in this frame.
    pub fn to_local(&self, pose: &CartesianPose) -> Result<CartesianPose> {
        match (self, pose) {
            (
                RigidTransform::Planar { translation, rotation },
                CartesianPose::Planar { position, heading },
            ) => Ok(CartesianPose::Planar {
                position: rotation.inverse() * (position - translation),
                heading: rotation.inverse() * heading,
            }),
            (
                RigidTransform::Spatial { translation, rotation },
                CartesianPose::Spatial { position, orientation },
            ) => Ok(CartesianPose::Spatial {
                position: rotation.inverse() * (position - translation),
                orientation: rotation.inverse() * orientation,
            }),
            _ => Err(space_mismatch(self.space(), pose.space())),
        }
    }

    /// Inverse of [`RigidTransform::to_local`].
    pub fn to_world(&self, pose: &CartesianPose) -> Result<CartesianPose> {
        match (self, pose) {
            (
                RigidTransform::Planar { translation, rotation },
                CartesianPose::Planar { position, heading },
            ) => Ok(CartesianPose::Planar {
                position: rotation * position + translation,
                heading: rotation * heading,
            }),
            (
                RigidTransform::Spatial { translation, rotation },
                CartesianPose::Spatial { position, orientation },
            ) => Ok(CartesianPose::Spatial {
                position: rotation * position + translation,
                orientation: rotation * orientation,
            }),
            _ => Err(space_mismatch(self.space(), pose.space())),
        }
    }

    /// Composes `self` after `other`: `(self * other).to_world(p) == self.to_world(other.to_world(p))`.
    pub fn compose(&self, other: &RigidTransform) -> Result<RigidTransform> {
        match (self, other) {
            (
                RigidTransform::Planar { translation: t1, rotation: r1 },
                RigidTransform::Planar { translation: t2, rotation: r2 },
            ) => Ok(RigidTransform::Planar {
                translation: r1 * t2 + t1,
                rotation: r1 * r2,
            }),
            (
                RigidTransform::Spatial { translation: t1, rotation: r1 },
                RigidTransform::Spatial { translation: t2, rotation: r2 },
            ) => Ok(RigidTransform::Spatial {
                translation: r1 * t2 + t1,
                rotation: r1 * r2,
            }),
            _ => Err(space_mismatch(self.space(), other.space())),
        }
    }
}

fn space_mismatch(expected: Space, found: Space) -> Error {
    let dim = |s: Space| match s {
        Space::TwoD => 2,
        Space::ThreeD => 3,
    };
    Error::DimensionMismatch {
        expected: dim(expected),
        found: dim(found),
    }
}

/// A pose re-expressed in one chart.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPose {
    pub chart: ChartId,
    pub position: ManifoldPoint,
    pub orientation: ManifoldPoint,
}

impl ChartPose {
    /// The pose as a single point on `chart.spec()`.
    pub fn point(&self) -> ManifoldPoint {
        let mut coords = Vec::with_capacity(
            self.position.coords().len() + self.orientation.coords().len(),
        );
        coords.extend_from_slice(self.position.coords().as_slice());
        coords.extend_from_slice(self.orientation.coords().as_slice());
        ManifoldPoint::from_parts_unchecked(self.chart.spec(), DVector::from_vec(coords))
    }

    /// Splits a point on `chart.spec()` back into position and orientation.
    pub fn from_point(chart: ChartId, point: &ManifoldPoint) -> Result<Self> {
        if point.spec() != &chart.spec() {
            return Err(Error::SpecMismatch {
                expected: chart.spec().to_string(),
                found: point.spec().to_string(),
            });
        }
        let split = chart.position_spec().ambient_dim();
        let c = point.coords().as_slice();
        Ok(ChartPose {
            chart,
            position: ManifoldPoint::from_slice(chart.position_spec(), &c[..split])?,
            orientation: ManifoldPoint::from_slice(chart.orientation_spec(), &c[split..])?,
        })
    }
}

/// Maps a world pose into `chart`, relative to `frame`.
pub fn to_chart(pose: &CartesianPose, chart: ChartId, frame: &RigidTransform) -> Result<ChartPose> {
    let coords = chart_coords(pose, chart, frame)?;
    let point = ManifoldPoint::from_parts_unchecked(chart.spec(), coords);
    ChartPose::from_point(chart, &point)
}

/// Ambient coordinates of `to_chart(pose, chart, frame).point()`.
pub fn chart_coords(pose: &CartesianPose, chart: ChartId, frame: &RigidTransform) -> Result<DVector<f64>> {
    if pose.space() != chart.space() {
        return Err(space_mismatch(chart.space(), pose.space()));
    }
    let local = frame.to_local(pose)?;
    match local {
        CartesianPose::Planar { position, heading } => {
            let h = [heading.re, heading.im];
            if chart == ChartId::CARTESIAN_2D {
                return Ok(DVector::from_vec(vec![position.x, position.y, h[0], h[1]]));
            }
            let r = position.norm();
            if r < ORIGIN_THRESHOLD {
                return Err(Error::OriginSingularity { radius: r });
            }
            let a = position / r;
            // heading rotated back by the azimuth
            let o = [a.x * h[0] + a.y * h[1], a.x * h[1] - a.y * h[0]];
            Ok(DVector::from_vec(vec![a.x, a.y, r, o[0], o[1]]))
        }
        CartesianPose::Spatial { position, orientation } => {
            let q = quat_array(&orientation);
            match chart.index() {
                1 => {
                    let p = position;
                    Ok(DVector::from_vec(vec![p.x, p.y, p.z, q[0], q[1], q[2], q[3]]))
                }
                2 => {
                    let rho = position.xy().norm();
                    if rho < ORIGIN_THRESHOLD {
                        return Err(Error::OriginSingularity { radius: rho });
                    }
                    let theta = position.y.atan2(position.x);
                    let frame = z_rotation(theta);
                    let o = quat_mul(&quat_conj(&frame), &q);
                    Ok(DVector::from_vec(vec![
                        position.x / rho,
                        position.y / rho,
                        rho,
                        position.z,
                        o[0],
                        o[1],
                        o[2],
                        o[3],
                    ]))
                }
                _ => {
                    let r = position.norm();
                    if r < ORIGIN_THRESHOLD {
                        return Err(Error::OriginSingularity { radius: r });
                    }
                    let n = position / r;
                    let frame = minimal_rotation_from_z(&n);
                    let o = quat_mul(&quat_conj(&frame), &q);
                    Ok(DVector::from_vec(vec![n.x, n.y, n.z, r, o[0], o[1], o[2], o[3]]))
                }
            }
        }
    }
}

/// Inverse of [`to_chart`]: rebuilds the world pose.
pub fn from_chart(chart_pose: &ChartPose, frame: &RigidTransform) -> Result<CartesianPose> {
    let c = chart_pose.point().into_coords();
    let local = match chart_pose.chart {
        ChartId::CARTESIAN_2D => CartesianPose::Planar {
            position: Vector2::new(c[0], c[1]),
            heading: UnitComplex::from_cos_sin_unchecked(c[2], c[3]),
        },
        ChartId::POLAR => {
            let (a, r) = (Vector2::new(c[0], c[1]), c[2]);
            let h = [a.x * c[3] - a.y * c[4], a.y * c[3] + a.x * c[4]];
            CartesianPose::Planar {
                position: a * r,
                heading: UnitComplex::from_cos_sin_unchecked(h[0], h[1]),
            }
        }
        ChartId::CARTESIAN_3D => CartesianPose::Spatial {
            position: Vector3::new(c[0], c[1], c[2]),
            orientation: unit_quat(&[c[3], c[4], c[5], c[6]]),
        },
        ChartId::CYLINDRICAL => {
            let theta = c[1].atan2(c[0]);
            let o = [c[4], c[5], c[6], c[7]];
            CartesianPose::Spatial {
                position: Vector3::new(c[0] * c[2], c[1] * c[2], c[3]),
                orientation: unit_quat(&quat_mul(&z_rotation(theta), &o)),
            }
        }
        _ => {
            let n = Vector3::new(c[0], c[1], c[2]);
            let o = [c[4], c[5], c[6], c[7]];
            CartesianPose::Spatial {
                position: n * c[3],
                orientation: unit_quat(&quat_mul(&minimal_rotation_from_z(&n), &o)),
            }
        }
    };
    frame.to_world(&local)
}

/// Differential of the chart map at `pose`, from Cartesian pose velocities
/// (world frame) to intrinsic tangent coordinates at the chart point.
pub fn chart_jacobian(pose: &CartesianPose, chart: ChartId, frame: &RigidTransform) -> Result<DMatrix<f64>> {
    let coords = chart_coords(pose, chart, frame)?;
    let spec = chart.spec();
    let ambient = chart_ambient_differential(pose, chart, frame, &coords)?;
    Ok(spec.tangent_basis(&coords).tr_mul(&ambient))
}

fn chart_ambient_differential(
    pose: &CartesianPose,
    chart: ChartId,
    frame: &RigidTransform,
    coords: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let local = frame.to_local(pose)?;
    let ncols = chart.pose_tangent_dim();
    let mut out = DMatrix::zeros(coords.len(), ncols);
    match (frame, local) {
        (RigidTransform::Planar { rotation, .. }, CartesianPose::Planar { position, heading }) => {
            let rt = rotation.inverse().to_rotation_matrix().into_inner();
            // columns: (dx, dy) in world, dheading
            for j in 0..3 {
                let (dp, dphi) = if j < 2 {
                    (rt.column(j).into_owned(), 0.0)
                } else {
                    (Vector2::zeros(), 1.0)
                };
                let col = if chart == ChartId::CARTESIAN_2D {
                    vec![dp.x, dp.y, -heading.im * dphi, heading.re * dphi]
                } else {
                    let r = position.norm();
                    let (x, y) = (position.x, position.y);
                    let dtheta = (x * dp.y - y * dp.x) / (r * r);
                    let dr = (x * dp.x + y * dp.y) / r;
                    let (a0, a1) = (x / r, y / r);
                    let (o0, o1) = (coords[3], coords[4]);
                    let dpsi = dphi - dtheta;
                    vec![-a1 * dtheta, a0 * dtheta, dr, -o1 * dpsi, o0 * dpsi]
                };
                out.set_column(j, &DVector::from_vec(col));
            }
        }
        (RigidTransform::Spatial { rotation, .. }, CartesianPose::Spatial { position, orientation }) => {
            let rt: Matrix3<f64> = rotation.inverse().to_rotation_matrix().into_inner();
            let q = quat_array(&orientation);
            for j in 0..6 {
                let (dp, w) = if j < 3 {
                    (rt.column(j).into_owned(), Vector3::zeros())
                } else {
                    (Vector3::zeros(), rt.column(j - 3).into_owned())
                };
                let dq = quat_scale(&quat_mul(&[0.0, w.x, w.y, w.z], &q), 0.5);
                let col = match chart.index() {
                    1 => vec![dp.x, dp.y, dp.z, dq[0], dq[1], dq[2], dq[3]],
                    2 => {
                        let (x, y) = (position.x, position.y);
                        let rho2 = x * x + y * y;
                        let rho = rho2.sqrt();
                        let dtheta = (x * dp.y - y * dp.x) / rho2;
                        let drho = (x * dp.x + y * dp.y) / rho;
                        let theta = y.atan2(x);
                        let frame_q = z_rotation(theta);
                        let half = 0.5 * theta;
                        let dframe_conj = [
                            -0.5 * dtheta * half.sin(),
                            0.0,
                            0.0,
                            -0.5 * dtheta * half.cos(),
                        ];
                        let dlocal = quat_add(
                            &quat_mul(&dframe_conj, &q),
                            &quat_mul(&quat_conj(&frame_q), &dq),
                        );
                        vec![
                            -y / rho * dtheta,
                            x / rho * dtheta,
                            drho,
                            dp.z,
                            dlocal[0],
                            dlocal[1],
                            dlocal[2],
                            dlocal[3],
                        ]
                    }
                    _ => {
                        let r = position.norm();
                        let n = position / r;
                        let dn = (dp - n * n.dot(&dp)) / r;
                        let dr = n.dot(&dp);
                        let s = 2.0 * (1.0 + n.z);
                        if s < 1e-12 {
                            return Err(Error::FrameSingularity);
                        }
                        let v = [1.0 + n.z, -n.y, n.x, 0.0];
                        let dv = [dn.z, -dn.y, dn.x, 0.0];
                        let ds = 2.0 * dn.z;
                        let root = s.sqrt();
                        let dframe: [f64; 4] =
                            std::array::from_fn(|i| dv[i] / root - v[i] * ds / (2.0 * s * root));
                        let frame_q = minimal_rotation_from_z(&n);
                        let dlocal = quat_add(
                            &quat_mul(&quat_conj(&dframe), &q),
                            &quat_mul(&quat_conj(&frame_q), &dq),
                        );
                        vec![
                            dn.x, dn.y, dn.z, dr, dlocal[0], dlocal[1], dlocal[2], dlocal[3],
                        ]
                    }
                };
                out.set_column(j, &DVector::from_vec(col));
            }
        }
        _ => return Err(space_mismatch(chart.space(), pose.space())),
    }
    Ok(out)
}

/// Offset of the orientation block in the ambient coordinates of `chart.spec()`.
pub fn orientation_offset(chart: ChartId) -> usize {
    chart.position_spec().ambient_dim()
}

/// Flips the quaternion block of a 3D chart point so that its dot product
/// with `reference`'s block is non-negative. Returns whether it flipped.
/// Planar charts are left untouched.
pub fn align_orientation(chart: ChartId, coords: &mut DVector<f64>, reference: &DVector<f64>) -> bool {
    if chart.space() != Space::ThreeD {
        return false;
    }
    let off = orientation_offset(chart);
    let dot = coords.rows(off, 4).dot(&reference.rows(off, 4));
    if dot < 0.0 {
        coords.rows_mut(off, 4).neg_mut();
        true
    } else {
        false
    }
}

pub(crate) fn quat_array(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub(crate) fn unit_quat(q: &[f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub(crate) fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn quat_conj(q: &[f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

fn quat_add(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|i| a[i] + b[i])
}

fn quat_scale(a: &[f64; 4], s: f64) -> [f64; 4] {
    a.map(|v| v * s)
}

fn z_rotation(theta: f64) -> [f64; 4] {
    let half = 0.5 * theta;
    [half.cos(), 0.0, 0.0, half.sin()]
}

/// Quaternion of the minimal rotation taking `z` onto the unit vector `n`.
/// At the antipode `n = -z` it is the half turn about `x`.
pub(crate) fn minimal_rotation_from_z(n: &Vector3<f64>) -> [f64; 4] {
    let s = 2.0 * (1.0 + n.z);
    if s < 1e-12 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    let root = s.sqrt();
    [(1.0 + n.z) / root, -n.y / root, n.x / root, 0.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::geodesic_distance;
    use nalgebra::Rotation2;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn origin2() -> RigidTransform {
        RigidTransform::identity(Space::TwoD)
    }

    #[test]
    fn chart_table() {
        assert_eq!(ChartId::POLAR.spec().to_string(), "S^1 x R^1 x S^1");
        assert_eq!(ChartId::CYLINDRICAL.spec().to_string(), "S^1 x R^2 x S^3");
        assert_eq!(ChartId::SPHERICAL.spec().to_string(), "S^2 x R^1 x S^3");
        assert_eq!(ChartId::SPHERICAL.spec().tangent_dim(), 6);
        assert!(ChartId::new(Space::TwoD, 3).is_err());
        assert!(ChartId::new(Space::ThreeD, 0).is_err());
        assert_eq!(ChartId::all(Space::ThreeD).len(), 3);
        for c in ChartId::all(Space::TwoD).into_iter().chain(ChartId::all(Space::ThreeD)) {
            assert_eq!(c.name().parse::<ChartId>().unwrap(), c);
        }
    }

    #[test]
    fn cartesian_chart_is_identity() {
        let pose = CartesianPose::planar(0.4, -1.2, 0.7);
        let cp = to_chart(&pose, ChartId::CARTESIAN_2D, &origin2()).unwrap();
        assert_eq!(cp.position.coords().as_slice(), &[0.4, -1.2]);
        assert!((cp.orientation.coords()[0] - 0.7f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn polar_example() {
        let pose = CartesianPose::planar(0.0, 2.0, FRAC_PI_2);
        let cp = to_chart(&pose, ChartId::POLAR, &origin2()).unwrap();
        let c = cp.point().into_coords();
        // oracle: rotation-matrix composition R(-azimuth) * R(heading)
        let local = Rotation2::new(-FRAC_PI_2) * Rotation2::new(FRAC_PI_2);
        assert!((c[0] - 0.0).abs() < 1e-15 && (c[1] - 1.0).abs() < 1e-15);
        assert!((c[2] - 2.0).abs() < 1e-15);
        assert!((c[3] - local.matrix()[(0, 0)]).abs() < 1e-15);
        assert!((c[4] - local.matrix()[(1, 0)]).abs() < 1e-15);
    }

    #[test]
    fn spherical_example_on_axis() {
        let pose = CartesianPose::spatial(Vector3::new(0.0, 0.0, 3.0), UnitQuaternion::identity());
        let cp = to_chart(&pose, ChartId::SPHERICAL, &RigidTransform::identity(Space::ThreeD)).unwrap();
        let c = cp.point().into_coords();
        assert_eq!(&c.as_slice()[..4], &[0.0, 0.0, 1.0, 3.0]);
        assert!((c[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spherical_orientation_matches_rotation_composition() {
        let p = Vector3::new(1.0, -2.0, 0.5);
        let q = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let pose = CartesianPose::spatial(p, q);
        let cp = to_chart(&pose, ChartId::SPHERICAL, &RigidTransform::identity(Space::ThreeD)).unwrap();
        let c = cp.point().into_coords();
        // oracle: the base frame maps z onto the radial direction by the
        // minimal rotation, built from nalgebra's rotation_between
        let base = UnitQuaternion::rotation_between(&Vector3::z(), &p.normalize()).unwrap();
        let expected = (base.inverse() * q).to_rotation_matrix();
        let got = unit_quat(&[c[4], c[5], c[6], c[7]]).to_rotation_matrix();
        assert!((expected.matrix() - got.matrix()).amax() < 1e-12);
    }

    #[test]
    fn cylindrical_coordinates() {
        let p = Vector3::new(-1.0, 1.0, 0.7);
        let q = UnitQuaternion::from_euler_angles(0.0, 0.0, 3.0 * PI / 4.0);
        let pose = CartesianPose::spatial(p, q);
        let c = chart_coords(&pose, ChartId::CYLINDRICAL, &RigidTransform::identity(Space::ThreeD)).unwrap();
        let s = 0.5f64.sqrt();
        assert!((c[0] + s).abs() < 1e-15 && (c[1] - s).abs() < 1e-15);
        assert!((c[2] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(c[3], 0.7);
        // yaw equal to the azimuth leaves the identity in the local frame
        assert!((c[4].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_through_every_chart() {
        let frame = RigidTransform::spatial(
            Vector3::new(0.2, -0.1, 0.4),
            UnitQuaternion::from_euler_angles(0.1, 0.2, -0.4),
        );
        let pose = CartesianPose::spatial(
            Vector3::new(0.5, 0.9, -0.3),
            UnitQuaternion::from_euler_angles(-0.7, 0.4, 2.0),
        );
        for chart in ChartId::all(Space::ThreeD) {
            let cp = to_chart(&pose, chart, &frame).unwrap();
            let back = from_chart(&cp, &frame).unwrap();
            let (CartesianPose::Spatial { position: a, orientation: qa }, CartesianPose::Spatial { position: b, orientation: qb }) = (pose, back) else {
                unreachable!()
            };
            assert!((a - b).amax() < 1e-12, "{chart}");
            assert!(qa.angle_to(&qb) < 1e-7, "{chart}");
        }
        let frame2 = RigidTransform::planar(1.0, 2.0, 0.5);
        let pose2 = CartesianPose::planar(-0.3, 0.8, 2.5);
        for chart in ChartId::all(Space::TwoD) {
            let back = from_chart(&to_chart(&pose2, chart, &frame2).unwrap(), &frame2).unwrap();
            let (CartesianPose::Planar { position: a, heading: ha }, CartesianPose::Planar { position: b, heading: hb }) = (pose2, back) else {
                unreachable!()
            };
            assert!((a - b).amax() < 1e-12);
            assert!((ha.angle() - hb.angle()).abs() < 1e-12);
        }
    }

    #[test]
    fn origin_singularity() {
        let frame = RigidTransform::planar(1.0, 1.0, 0.0);
        let pose = CartesianPose::planar(1.0, 1.0, 0.0);
        assert!(matches!(
            to_chart(&pose, ChartId::POLAR, &frame),
            Err(Error::OriginSingularity { .. })
        ));
        assert!(to_chart(&pose, ChartId::CARTESIAN_2D, &frame).is_ok());
        let pose3 = CartesianPose::spatial(Vector3::new(0.0, 0.0, 2.0), UnitQuaternion::identity());
        let frame3 = RigidTransform::identity(Space::ThreeD);
        assert!(to_chart(&pose3, ChartId::CYLINDRICAL, &frame3).is_err());
        assert!(to_chart(&pose3, ChartId::SPHERICAL, &frame3).is_ok());
    }

    #[test]
    fn dimension_mismatch() {
        let pose = CartesianPose::planar(1.0, 0.0, 0.0);
        assert!(matches!(
            to_chart(&pose, ChartId::SPHERICAL, &RigidTransform::identity(Space::ThreeD)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cartesian_chart_distance_is_euclidean() {
        let a = to_chart(&CartesianPose::planar(0.0, 0.0, 0.3), ChartId::CARTESIAN_2D, &origin2()).unwrap();
        let b = to_chart(&CartesianPose::planar(3.0, 4.0, 0.3), ChartId::CARTESIAN_2D, &origin2()).unwrap();
        assert_eq!(geodesic_distance(&a.position, &b.position).unwrap(), 5.0);
    }

    #[test]
    fn polar_jacobian_on_the_x_axis() {
        let r = 2.0;
        let jac = chart_jacobian(&CartesianPose::planar(r, 0.0, 0.0), ChartId::POLAR, &origin2()).unwrap();
        assert_eq!(jac.shape(), (3, 3));
        // azimuth row sees dy / r, radius row sees dx
        assert!((jac[(0, 0)]).abs() < 1e-15);
        assert!((jac[(0, 1)].abs() - 1.0 / r).abs() < 1e-15);
        assert!((jac[(1, 0)] - 1.0).abs() < 1e-15);
        assert!(jac[(1, 1)].abs() < 1e-15);
    }

    #[test]
    fn cartesian_jacobian_is_identity() {
        let jac = chart_jacobian(&CartesianPose::planar(0.3, 0.1, 0.2), ChartId::CARTESIAN_2D, &origin2()).unwrap();
        assert!((jac.abs() - DMatrix::identity(3, 3)).amax() < 1e-15);
        let pose = CartesianPose::spatial(Vector3::new(0.3, 0.1, 0.2), UnitQuaternion::identity());
        let jac = chart_jacobian(&pose, ChartId::CARTESIAN_3D, &RigidTransform::identity(Space::ThreeD)).unwrap();
        assert_eq!(jac.shape(), (6, 6));
        assert!((jac.view((0, 0), (3, 3)).abs() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-15);
        // quaternion tangent of a rotation vector w is w / 2, in some orthonormal basis
        let rot = jac.view((3, 3), (3, 3)).into_owned();
        assert!((&rot * rot.transpose() - DMatrix::<f64>::identity(3, 3) * 0.25).amax() < 1e-15);
    }

    #[test]
    fn align_flips_negative_hemisphere() {
        let chart = ChartId::CARTESIAN_3D;
        let reference = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let mut c = DVector::from_vec(vec![1.0, 0.0, 0.0, -0.8, 0.6, 0.0, 0.0]);
        assert!(align_orientation(chart, &mut c, &reference));
        assert_eq!(c.as_slice(), &[1.0, 0.0, 0.0, 0.8, -0.6, -0.0, -0.0]);
        assert!(!align_orientation(chart, &mut c, &reference));
    }
}
