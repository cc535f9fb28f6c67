//! Planar scene as SVG: arm snapshots in gray shades, reference contours at
//! one standard deviation, end-effector paths.

use std::fmt::Write;

use geoilqr_core::charts::{from_chart, CartesianPose, ChartId, ChartPose, RigidTransform};
use geoilqr_core::kinematics::ArmModel;
use geoilqr_core::manifold::ManifoldPoint;
use geoilqr_core::planner::PlanResult;
use geoilqr_core::stats::ManifoldGaussian;
use nalgebra::{DVector, Vector2};

const SIZE: f64 = 600.0;
const CONTOUR_POINTS: usize = 64;
const SNAPSHOTS: usize = 6;

struct View {
    min: Vector2<f64>,
    scale: f64,
}

impl View {
    fn fit(points: &[Vector2<f64>]) -> Self {
        let mut min = Vector2::repeat(f64::INFINITY);
        let mut max = Vector2::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let span = (max - min).max().max(1e-3) * 1.1;
        let center = (min + max) / 2.0;
        Self {
            min: center - Vector2::repeat(span / 2.0),
            scale: SIZE / span,
        }
    }

    fn map(&self, p: &Vector2<f64>) -> (f64, f64) {
        ((p.x - self.min.x) * self.scale, SIZE - (p.y - self.min.y) * self.scale)
    }

    fn polyline(&self, points: &[Vector2<f64>]) -> String {
        points
            .iter()
            .map(|p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// World positions of the one-standard-deviation contour of the position
/// block of `g`, pushed through the chart's exponential map.
pub fn position_contour(chart: ChartId, g: &ManifoldGaussian, frame: &RigidTransform) -> Vec<Vector2<f64>> {
    let dim = chart.position_spec().tangent_dim();
    if dim != 2 {
        return Vec::new();
    }
    let block = g.covariance().view((0, 0), (2, 2)).into_owned();
    let eig = block.symmetric_eigen();
    let spec = chart.spec();
    let mut out = Vec::with_capacity(CONTOUR_POINTS + 1);
    for i in 0..=CONTOUR_POINTS {
        let a = 2.0 * std::f64::consts::PI * i as f64 / CONTOUR_POINTS as f64;
        let unit = DVector::from_vec(vec![a.cos(), a.sin()]);
        let local = &eig.eigenvectors * DVector::from_fn(2, |k, _| eig.eigenvalues[k].max(0.0).sqrt() * unit[k]);
        let mut v = DVector::zeros(spec.tangent_dim());
        v.rows_mut(0, 2).copy_from(&local);
        let Ok(coords) = spec.exp(g.mean().coords(), &v) else { continue };
        let Ok(point) = ManifoldPoint::new(spec.clone(), coords) else { continue };
        let Ok(pose) = ChartPose::from_point(chart, &point) else { continue };
        if let Ok(CartesianPose::Planar { position, .. }) = from_chart(&pose, frame) {
            out.push(position);
        }
    }
    out
}

pub struct Scene<'a> {
    pub arm: &'a ArmModel,
    pub frame: RigidTransform,
    /// Contours with the chart they belong to.
    pub contours: Vec<(ChartId, Vec<Vector2<f64>>)>,
    pub plans: Vec<&'a PlanResult>,
    pub metadata: String,
}

fn chart_color(chart: ChartId) -> &'static str {
    match chart.index() {
        1 => "#1f77b4",
        2 => "#ff7f0e",
        _ => "#2ca02c",
    }
}

pub fn render(scene: &Scene) -> String {
    let mut arms: Vec<Vec<Vec<Vector2<f64>>>> = Vec::new();
    let mut paths: Vec<Vec<Vector2<f64>>> = Vec::new();
    for plan in &scene.plans {
        let horizon = plan.trajectory.horizon();
        let mut snapshots = Vec::new();
        let mut path = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let joints = scene.arm.joint_positions(&plan.trajectory.state(t)).unwrap_or_default();
            if let Some(tip) = joints.last() {
                path.push(*tip);
            }
            let stride = (horizon - 1).max(1) as f64 / (SNAPSHOTS - 1) as f64;
            if (0..SNAPSHOTS).any(|s| (s as f64 * stride).round() as usize == t) {
                snapshots.push(joints);
            }
        }
        arms.push(snapshots);
        paths.push(path);
    }
    let mut all: Vec<Vector2<f64>> = arms.iter().flatten().flatten().copied().collect();
    all.extend(scene.contours.iter().flat_map(|(_, c)| c.iter().copied()));
    if let RigidTransform::Planar { translation, .. } = scene.frame {
        all.push(translation);
    }
    let view = View::fit(&all);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, "<metadata>{}</metadata>", escape(&scene.metadata));
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (chart, contour) in &scene.contours {
        if contour.len() > 1 {
            let _ = writeln!(
                svg,
                r#"<polyline class="{}" points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                chart.name(),
                view.polyline(contour),
                chart_color(*chart)
            );
        }
    }
    for snapshots in &arms {
        let n = snapshots.len().max(2) - 1;
        for (i, joints) in snapshots.iter().enumerate() {
            // light gray at the start, dark at the end
            let shade = 200 - (160 * i / n) as u32;
            let _ = writeln!(
                svg,
                r#"<polyline class="arm" points="{}" fill="none" stroke="rgb({shade},{shade},{shade})" stroke-width="3" stroke-linecap="round"/>"#,
                view.polyline(joints)
            );
        }
    }
    for path in &paths {
        let _ = writeln!(
            svg,
            r#"<polyline class="path" points="{}" fill="none" stroke="black" stroke-dasharray="4 3" stroke-width="1"/>"#,
            view.polyline(path)
        );
    }
    if let RigidTransform::Planar { translation, .. } = scene.frame {
        let (x, y) = view.map(&translation);
        let _ = writeln!(svg, r#"<circle class="object" cx="{x:.2}" cy="{y:.2}" r="5" fill="red"/>"#);
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
