//! Analytic Riemannian primitives on Euclidean spaces, unit spheres and
//! their Cartesian products.
//!
//! Points are stored in ambient coordinates: a Euclidean factor `R^d` uses
//! `d` numbers and a sphere factor `S^d` a unit vector of `d + 1` numbers.
//! Tangent vectors are stored in intrinsic coordinates with respect to an
//! orthonormal basis of the tangent space. For a sphere factor the basis at
//! `p` is built from the Householder reflection that maps `p` onto a
//! coordinate axis, so it is a deterministic function of the base point.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `|mu^T x + 1|` below this on a sphere factor makes the Log map undefined.
pub const ANTIPODAL_TOLERANCE: f64 = 1e-9;
/// Direction normalization guard in the sphere Log map.
pub const ZERO_NORM_GUARD: f64 = 1e-12;
/// Allowed deviation from unit norm for sphere blocks.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldSpec {
    Euclidean(usize),
    Sphere(usize),
    Product(Vec<ManifoldSpec>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorKind {
    Euclidean,
    Sphere,
}

/// A leaf factor of a (possibly nested) product, with its offsets in the
/// ambient and tangent coordinate vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Factor {
    pub kind: FactorKind,
    pub dim: usize,
    pub ambient_offset: usize,
    pub tangent_offset: usize,
}

impl Factor {
    pub fn ambient_dim(&self) -> usize {
        match self.kind {
            FactorKind::Euclidean => self.dim,
            FactorKind::Sphere => self.dim + 1,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        self.dim
    }
}

impl fmt::Display for ManifoldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifoldSpec::Euclidean(d) => write!(f, "R^{d}"),
            ManifoldSpec::Sphere(d) => write!(f, "S^{d}"),
            ManifoldSpec::Product(parts) => {
                for (i, part) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, " x ")?;
                    }
                    write!(f, "{part}")?;
                }
                Ok(())
            }
        }
    }
}

impl ManifoldSpec {
    pub fn product(parts: impl IntoIterator<Item = ManifoldSpec>) -> Self {
        ManifoldSpec::Product(parts.into_iter().collect())
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            ManifoldSpec::Euclidean(d) => *d,
            ManifoldSpec::Sphere(d) => d + 1,
            ManifoldSpec::Product(parts) => parts.iter().map(Self::ambient_dim).sum(),
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            ManifoldSpec::Euclidean(d) | ManifoldSpec::Sphere(d) => *d,
            ManifoldSpec::Product(parts) => parts.iter().map(Self::tangent_dim).sum(),
        }
    }

    /// Leaf factors in order, nested products flattened.
    pub fn factors(&self) -> Vec<Factor> {
        let mut out = Vec::new();
        let mut ambient = 0;
        let mut tangent = 0;
        self.collect_factors(&mut out, &mut ambient, &mut tangent);
        out
    }

    fn collect_factors(&self, out: &mut Vec<Factor>, ambient: &mut usize, tangent: &mut usize) {
        let leaf = |kind, dim| Factor {
            kind,
            dim,
            ambient_offset: *ambient,
            tangent_offset: *tangent,
        };
        match self {
            ManifoldSpec::Euclidean(d) => {
                out.push(leaf(FactorKind::Euclidean, *d));
                *ambient += d;
                *tangent += d;
            }
            ManifoldSpec::Sphere(d) => {
                out.push(leaf(FactorKind::Sphere, *d));
                *ambient += d + 1;
                *tangent += d;
            }
            ManifoldSpec::Product(parts) => {
                for part in parts {
                    part.collect_factors(out, ambient, tangent);
                }
            }
        }
    }

    fn check_ambient(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ambient_dim(),
                found: v.len(),
            });
        }
        Ok(())
    }

    fn check_tangent(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.tangent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.tangent_dim(),
                found: v.len(),
            });
        }
        Ok(())
    }

    /// Checks dimensions, finiteness and unit norm of every sphere block.
    pub fn validate_point(&self, coords: &DVector<f64>) -> Result<()> {
        self.check_ambient(coords)?;
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidPoint("non-finite coordinate".into()));
        }
        for f in self.factors() {
            if f.kind == FactorKind::Sphere {
                let norm = coords.rows(f.ambient_offset, f.ambient_dim()).norm();
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::InvalidPoint(format!(
                        "sphere block at offset {} has norm {norm}",
                        f.ambient_offset
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rescales every sphere block to unit norm.
    pub fn normalize(&self, coords: &mut DVector<f64>) {
        for f in self.factors() {
            if f.kind == FactorKind::Sphere {
                let mut block = coords.rows_mut(f.ambient_offset, f.ambient_dim());
                let norm = block.norm();
                if norm > 0.0 {
                    block /= norm;
                }
            }
        }
    }

    /// Orthonormal tangent basis at `p`, as an (ambient x tangent) matrix.
    pub fn tangent_basis(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let mut basis = DMatrix::zeros(self.ambient_dim(), self.tangent_dim());
        for f in self.factors() {
            match f.kind {
                FactorKind::Euclidean => {
                    for i in 0..f.dim {
                        basis[(f.ambient_offset + i, f.tangent_offset + i)] = 1.0;
                    }
                }
                FactorKind::Sphere => {
                    let block = block_of(p, &f);
                    basis
                        .view_mut((f.ambient_offset, f.tangent_offset), (f.ambient_dim(), f.dim))
                        .copy_from(&sphere_basis(&block));
                }
            }
        }
        basis
    }

    /// Logarithmic map in intrinsic coordinates at `mu`.
    pub fn log(&self, mu: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_ambient(mu)?;
        self.check_ambient(x)?;
        let mut out = DVector::zeros(self.tangent_dim());
        for f in self.factors() {
            match f.kind {
                FactorKind::Euclidean => {
                    let d = x.rows(f.ambient_offset, f.dim) - mu.rows(f.ambient_offset, f.dim);
                    out.rows_mut(f.tangent_offset, f.dim).copy_from(&d);
                }
                FactorKind::Sphere => {
                    let m = block_of(mu, &f);
                    let ambient = sphere_log(&m, &block_of(x, &f))?;
                    let intrinsic = sphere_basis(&m).tr_mul(&ambient);
                    out.rows_mut(f.tangent_offset, f.dim).copy_from(&intrinsic);
                }
            }
        }
        Ok(out)
    }

    /// Exponential map of intrinsic tangent coordinates `v` at `mu`.
    pub fn exp(&self, mu: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_ambient(mu)?;
        self.check_tangent(v)?;
        let mut out = DVector::zeros(self.ambient_dim());
        for f in self.factors() {
            match f.kind {
                FactorKind::Euclidean => {
                    let p = mu.rows(f.ambient_offset, f.dim) + v.rows(f.tangent_offset, f.dim);
                    out.rows_mut(f.ambient_offset, f.dim).copy_from(&p);
                }
                FactorKind::Sphere => {
                    let m = block_of(mu, &f);
                    let ambient = sphere_basis(&m) * v.rows(f.tangent_offset, f.dim);
                    let p = sphere_exp(&m, &ambient);
                    out.rows_mut(f.ambient_offset, f.ambient_dim()).copy_from(&p);
                }
            }
        }
        Ok(out)
    }

    /// Parallel transport of intrinsic tangent coordinates `v` from `from`
    /// to `to` along the connecting geodesic.
    pub fn transport(
        &self,
        from: &DVector<f64>,
        to: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_ambient(from)?;
        self.check_ambient(to)?;
        self.check_tangent(v)?;
        let mut out = v.clone();
        for f in self.factors() {
            if f.kind == FactorKind::Sphere {
                let a = block_of(from, &f);
                let b = block_of(to, &f);
                let ambient = sphere_basis(&a) * v.rows(f.tangent_offset, f.dim);
                let moved = sphere_transport(&a, &b, &ambient)?;
                out.rows_mut(f.tangent_offset, f.dim)
                    .copy_from(&sphere_basis(&b).tr_mul(&moved));
            }
        }
        Ok(out)
    }

    /// Matrix of the parallel transport map between intrinsic coordinates
    /// at `from` and at `to`. Orthogonal.
    pub fn transport_matrix(&self, from: &DVector<f64>, to: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_ambient(from)?;
        self.check_ambient(to)?;
        let n = self.tangent_dim();
        let mut out = DMatrix::identity(n, n);
        for f in self.factors() {
            if f.kind == FactorKind::Sphere {
                let a = block_of(from, &f);
                let b = block_of(to, &f);
                let ba = sphere_basis(&a);
                let bb = sphere_basis(&b);
                let mut block = DMatrix::zeros(f.dim, f.dim);
                for j in 0..f.dim {
                    let moved = sphere_transport(&a, &b, &ba.column(j).into_owned())?;
                    block.set_column(j, &bb.tr_mul(&moved));
                }
                out.view_mut((f.tangent_offset, f.tangent_offset), (f.dim, f.dim))
                    .copy_from(&block);
            }
        }
        Ok(out)
    }

    /// Differential of `x -> Log_mu(x)`, mapping intrinsic coordinates at
    /// `x` to intrinsic coordinates at `mu`.
    pub fn log_jacobian(&self, mu: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_ambient(mu)?;
        self.check_ambient(x)?;
        let n = self.tangent_dim();
        let mut out = DMatrix::zeros(n, n);
        for f in self.factors() {
            match f.kind {
                FactorKind::Euclidean => {
                    for i in 0..f.dim {
                        out[(f.tangent_offset + i, f.tangent_offset + i)] = 1.0;
                    }
                }
                FactorKind::Sphere => {
                    let m = block_of(mu, &f);
                    let p = block_of(x, &f);
                    let ambient = sphere_log_differential(&m, &p)?;
                    let block = sphere_basis(&m).tr_mul(&ambient) * sphere_basis(&p);
                    out.view_mut((f.tangent_offset, f.tangent_offset), (f.dim, f.dim))
                        .copy_from(&block);
                }
            }
        }
        Ok(out)
    }

    /// Embeds intrinsic tangent coordinates at `p` into ambient space.
    pub fn to_ambient(&self, p: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.tangent_basis(p) * v
    }
}

fn block_of(v: &DVector<f64>, f: &Factor) -> DVector<f64> {
    v.rows(f.ambient_offset, f.ambient_dim()).into_owned()
}

/// Orthonormal basis of the tangent space of the unit sphere at `p`.
///
/// Columns are the first `n - 1` columns of the Householder reflection
/// `H = I - 2 w w^T / (w^T w)` with `w = p + sign(p_last) e_last`, which
/// satisfies `H p = -sign(p_last) e_last`.
pub(crate) fn sphere_basis(p: &DVector<f64>) -> DMatrix<f64> {
    let n = p.len();
    let last = n - 1;
    let sign = if p[last] >= 0.0 { 1.0 } else { -1.0 };
    let mut w = p.clone();
    w[last] += sign;
    let scale = 2.0 / w.norm_squared();
    DMatrix::from_fn(n, n - 1, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - scale * w[i] * w[j]
    })
}

/// Ambient sphere Log map.
pub(crate) fn sphere_log(mu: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    let c = mu.dot(x);
    if (c + 1.0).abs() <= ANTIPODAL_TOLERANCE {
        return Err(Error::AntipodalPoint);
    }
    let w = x - mu * c;
    let s = w.norm();
    if s < ZERO_NORM_GUARD {
        return Ok(DVector::zeros(mu.len()));
    }
    let theta = s.atan2(c);
    Ok(w * (theta / s))
}

pub(crate) fn sphere_exp(mu: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    let sinc = if n < 1e-8 { 1.0 - n * n / 6.0 } else { n.sin() / n };
    let mut p = mu * n.cos() + v * sinc;
    let norm = p.norm();
    p /= norm;
    p
}

pub(crate) fn sphere_transport(
    from: &DVector<f64>,
    to: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let u = sphere_log(from, to)?;
    let theta = u.norm();
    if theta < ZERO_NORM_GUARD {
        return Ok(v.clone());
    }
    let e = u / theta;
    let along = e.dot(v);
    Ok(v + (e * (theta.cos() - 1.0) - from * theta.sin()) * along)
}

/// Ambient differential of `x -> Log_mu(x)` on the unit sphere:
/// `g'(c) w mu^T + g(c) (I - mu mu^T)` with `c = mu^T x`, `w = x - c mu`
/// and `g = theta / sin(theta)`. Acts on tangent vectors at `x`.
fn sphere_log_differential(mu: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let c = mu.dot(x);
    if (c + 1.0).abs() <= ANTIPODAL_TOLERANCE {
        return Err(Error::AntipodalPoint);
    }
    let w = x - mu * c;
    let s = w.norm();
    let theta = s.atan2(c);
    let (g, dg) = if theta < 1e-4 {
        let t2 = theta * theta;
        (1.0 + t2 / 6.0, -1.0 / 3.0 - 2.0 * t2 / 15.0)
    } else {
        (theta / s, (theta * c - s) / (s * s * s))
    };
    let n = mu.len();
    let projector = DMatrix::identity(n, n) - mu * mu.transpose();
    Ok(&w * mu.transpose() * dg + projector * g)
}

/// A point on a manifold, in ambient coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct ManifoldPoint {
    spec: ManifoldSpec,
    coords: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    spec: ManifoldSpec,
    coords: Vec<f64>,
}

impl TryFrom<RawPoint> for ManifoldPoint {
    type Error = Error;

    fn try_from(raw: RawPoint) -> Result<Self> {
        ManifoldPoint::new(raw.spec, DVector::from_vec(raw.coords))
    }
}

impl From<ManifoldPoint> for RawPoint {
    fn from(p: ManifoldPoint) -> Self {
        RawPoint {
            spec: p.spec,
            coords: p.coords.as_slice().to_vec(),
        }
    }
}

impl ManifoldPoint {
    pub fn new(spec: ManifoldSpec, coords: DVector<f64>) -> Result<Self> {
        spec.validate_point(&coords)?;
        Ok(Self { spec, coords })
    }

    /// Like [`ManifoldPoint::new`] but rescales sphere blocks to unit norm
    /// first. Zero sphere blocks are still rejected.
    pub fn new_normalized(spec: ManifoldSpec, mut coords: DVector<f64>) -> Result<Self> {
        spec.check_ambient(&coords)?;
        spec.normalize(&mut coords);
        Self::new(spec, coords)
    }

    pub fn from_slice(spec: ManifoldSpec, coords: &[f64]) -> Result<Self> {
        Self::new(spec, DVector::from_column_slice(coords))
    }

    pub fn spec(&self) -> &ManifoldSpec {
        &self.spec
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn into_coords(self) -> DVector<f64> {
        self.coords
    }

    pub(crate) fn from_parts_unchecked(spec: ManifoldSpec, coords: DVector<f64>) -> Self {
        Self { spec, coords }
    }

    pub fn tangent_basis(&self) -> DMatrix<f64> {
        self.spec.tangent_basis(&self.coords)
    }

    fn same_spec(&self, other: &ManifoldPoint) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::SpecMismatch {
                expected: self.spec.to_string(),
                found: other.spec.to_string(),
            });
        }
        Ok(())
    }
}

/// A tangent vector in intrinsic coordinates at `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    base: ManifoldPoint,
    coords: DVector<f64>,
}

impl TangentVector {
    pub fn new(base: ManifoldPoint, coords: DVector<f64>) -> Result<Self> {
        base.spec.check_tangent(&coords)?;
        Ok(Self { base, coords })
    }

    pub fn zero(base: ManifoldPoint) -> Self {
        let n = base.spec.tangent_dim();
        Self {
            base,
            coords: DVector::zeros(n),
        }
    }

    /// Builds a tangent vector from an ambient vector, projecting out any
    /// component normal to the sphere factors.
    pub fn from_ambient(base: ManifoldPoint, ambient: &DVector<f64>) -> Result<Self> {
        base.spec.check_ambient(ambient)?;
        let coords = base.tangent_basis().tr_mul(ambient);
        Ok(Self { base, coords })
    }

    pub fn base(&self) -> &ManifoldPoint {
        &self.base
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn norm(&self) -> f64 {
        self.coords.norm()
    }

    pub fn to_ambient(&self) -> DVector<f64> {
        self.base.spec.to_ambient(&self.base.coords, &self.coords)
    }

    pub fn dot(&self, other: &TangentVector) -> Result<f64> {
        check_base(&self.base, &other.base)?;
        Ok(self.coords.dot(&other.coords))
    }
}

fn check_base(expected: &ManifoldPoint, found: &ManifoldPoint) -> Result<()> {
    expected.same_spec(found)?;
    if (&expected.coords - &found.coords).amax() > 1e-12 {
        return Err(Error::BaseMismatch);
    }
    Ok(())
}

/// Residual of `x` in the tangent space of `mu`; concatenates the per-factor
/// residuals of a product.
pub fn log_map(mu: &ManifoldPoint, x: &ManifoldPoint) -> Result<TangentVector> {
    mu.same_spec(x)?;
    let coords = mu.spec.log(&mu.coords, &x.coords)?;
    Ok(TangentVector {
        base: mu.clone(),
        coords,
    })
}

pub fn exp_map(mu: &ManifoldPoint, v: &TangentVector) -> Result<ManifoldPoint> {
    check_base(mu, &v.base)?;
    let coords = mu.spec.exp(&mu.coords, &v.coords)?;
    Ok(ManifoldPoint::from_parts_unchecked(mu.spec.clone(), coords))
}

pub fn parallel_transport(
    from: &ManifoldPoint,
    to: &ManifoldPoint,
    v: &TangentVector,
) -> Result<TangentVector> {
    from.same_spec(to)?;
    check_base(from, &v.base)?;
    let coords = from.spec.transport(&from.coords, &to.coords, &v.coords)?;
    Ok(TangentVector {
        base: to.clone(),
        coords,
    })
}

pub fn geodesic_distance(a: &ManifoldPoint, b: &ManifoldPoint) -> Result<f64> {
    Ok(log_map(a, b)?.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn s1(angle: f64) -> ManifoldPoint {
        ManifoldPoint::from_slice(ManifoldSpec::Sphere(1), &[angle.cos(), angle.sin()]).unwrap()
    }

    #[test]
    fn dims() {
        let spec = ManifoldSpec::product([
            ManifoldSpec::Sphere(2),
            ManifoldSpec::Euclidean(1),
            ManifoldSpec::Sphere(3),
        ]);
        assert_eq!(spec.ambient_dim(), 3 + 1 + 4);
        assert_eq!(spec.tangent_dim(), 2 + 1 + 3);
        assert_eq!(spec.to_string(), "S^2 x R^1 x S^3");
    }

    #[test]
    fn basis_is_orthonormal_and_tangent() {
        for p in [
            DVector::from_vec(vec![0.0, 0.0, 1.0]),
            DVector::from_vec(vec![0.0, 0.0, -1.0]),
            DVector::from_vec(vec![0.6, 0.0, 0.8]),
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
        ] {
            let b = sphere_basis(&p);
            let gram = b.tr_mul(&b);
            assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-14);
            assert!(b.tr_mul(&p).amax() < 1e-14);
        }
    }

    #[test]
    fn log_identity_is_zero() {
        let p = s1(0.3);
        assert_eq!(log_map(&p, &p).unwrap().norm(), 0.0);
    }

    #[test]
    fn euclidean_log_is_difference() {
        let spec = ManifoldSpec::Euclidean(2);
        let mu = ManifoldPoint::from_slice(spec.clone(), &[1.0, 2.0]).unwrap();
        let x = ManifoldPoint::from_slice(spec, &[4.0, 6.0]).unwrap();
        let v = log_map(&mu, &x).unwrap();
        assert_eq!(v.coords().as_slice(), &[3.0, 4.0]);
        assert_eq!(geodesic_distance(&mu, &x).unwrap(), 5.0);
    }

    #[test]
    fn quarter_circle_log_and_exp() {
        let mu = s1(0.0);
        let x = s1(FRAC_PI_2);
        let v = log_map(&mu, &x).unwrap();
        assert!((v.norm() - FRAC_PI_2).abs() < 1e-12);
        let ambient = v.to_ambient();
        assert!((ambient - DVector::from_vec(vec![0.0, FRAC_PI_2])).amax() < 1e-12);
        let back = exp_map(&mu, &v).unwrap();
        assert!((back.coords() - x.coords()).amax() < 1e-9);
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let mu = s1(1.1);
        assert_eq!(exp_map(&mu, &TangentVector::zero(mu.clone())).unwrap(), mu);
        let spec = ManifoldSpec::Euclidean(3);
        let o = ManifoldPoint::from_slice(spec, &[0.0; 3]).unwrap();
        let v = TangentVector::new(o.clone(), DVector::from_vec(vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(exp_map(&o, &v).unwrap().coords().as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn antipodal_is_rejected() {
        assert!(matches!(
            log_map(&s1(0.0), &s1(PI)),
            Err(Error::AntipodalPoint)
        ));
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let e = ManifoldPoint::from_slice(ManifoldSpec::Euclidean(2), &[1.0, 0.0]).unwrap();
        assert!(matches!(log_map(&s1(0.0), &e), Err(Error::SpecMismatch { .. })));
    }

    #[test]
    fn near_antipode_distance_matches_arc_length() {
        let a = s1(0.0);
        let b = s1(PI - 0.1);
        // dense polyline along the short great-circle arc
        let n = 200_000;
        let mut arc = 0.0;
        for i in 0..n {
            let t0 = (PI - 0.1) * i as f64 / n as f64;
            let t1 = (PI - 0.1) * (i + 1) as f64 / n as f64;
            arc += ((t1.cos() - t0.cos()).powi(2) + (t1.sin() - t0.sin()).powi(2)).sqrt();
        }
        let d = geodesic_distance(&a, &b).unwrap();
        assert!((d - (PI - 0.1)).abs() < 1e-9);
        assert!((d - arc).abs() < 1e-6);
    }

    #[test]
    fn unnormalized_point_is_rejected() {
        assert!(ManifoldPoint::from_slice(ManifoldSpec::Sphere(1), &[1.0, 0.1]).is_err());
        let p = ManifoldPoint::new_normalized(ManifoldSpec::Sphere(1), DVector::from_vec(vec![2.0, 0.0]))
            .unwrap();
        assert_eq!(p.coords().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn transport_quarter_circle_round_trip() {
        let spec = ManifoldSpec::Sphere(2);
        let a = ManifoldPoint::from_slice(spec.clone(), &[1.0, 0.0, 0.0]).unwrap();
        let b = ManifoldPoint::from_slice(spec, &[0.0, 1.0, 0.0]).unwrap();
        let v = TangentVector::new(a.clone(), DVector::from_vec(vec![0.3, -0.7])).unwrap();
        let w = TangentVector::new(a.clone(), DVector::from_vec(vec![1.2, 0.4])).unwrap();
        let tv = parallel_transport(&a, &b, &v).unwrap();
        let tw = parallel_transport(&a, &b, &w).unwrap();
        assert!((tv.dot(&tw).unwrap() - v.dot(&w).unwrap()).abs() < 1e-12);
        // the component along the geodesic is carried onto the new tangent of the geodesic
        let back = parallel_transport(&b, &a, &tv).unwrap();
        assert!((back.coords() - v.coords()).amax() < 1e-9);
    }

    #[test]
    fn transport_is_identity_on_flat_factors_and_same_point() {
        let spec = ManifoldSpec::product([ManifoldSpec::Euclidean(2), ManifoldSpec::Sphere(1)]);
        let a = ManifoldPoint::from_slice(spec.clone(), &[0.0, 0.0, 1.0, 0.0]).unwrap();
        let b = ManifoldPoint::from_slice(spec, &[5.0, -1.0, 1.0, 0.0]).unwrap();
        let v = TangentVector::new(a.clone(), DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(parallel_transport(&a, &b, &v).unwrap().coords(), v.coords());
        assert_eq!(parallel_transport(&a, &a, &v).unwrap().coords(), v.coords());
    }

    #[test]
    fn transport_matrix_matches_vector_transport() {
        let spec = ManifoldSpec::product([ManifoldSpec::Sphere(2), ManifoldSpec::Euclidean(1)]);
        let a = ManifoldPoint::new_normalized(spec.clone(), DVector::from_vec(vec![0.2, 0.3, 0.9, 1.0])).unwrap();
        let b = ManifoldPoint::new_normalized(spec, DVector::from_vec(vec![-0.5, 0.4, 0.6, 2.0])).unwrap();
        let v = DVector::from_vec(vec![0.1, -0.4, 0.7]);
        let m = a.spec().transport_matrix(a.coords(), b.coords()).unwrap();
        let direct = a.spec().transport(a.coords(), b.coords(), &v).unwrap();
        assert!((m * v - direct).amax() < 1e-12);
    }

    #[test]
    fn log_jacobian_matches_finite_differences() {
        let spec = ManifoldSpec::product([
            ManifoldSpec::Sphere(2),
            ManifoldSpec::Euclidean(2),
            ManifoldSpec::Sphere(1),
        ]);
        let mu = ManifoldPoint::new_normalized(
            spec.clone(),
            DVector::from_vec(vec![0.1, 0.2, 0.95, 0.3, -0.2, 0.8, 0.6]),
        )
        .unwrap();
        let x = ManifoldPoint::new_normalized(
            spec.clone(),
            DVector::from_vec(vec![-0.4, 0.5, 0.7, 1.0, 0.1, -0.3, 0.9]),
        )
        .unwrap();
        let jac = spec.log_jacobian(mu.coords(), x.coords()).unwrap();
        let h = 1e-6;
        let n = spec.tangent_dim();
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = h;
            let plus = spec.exp(x.coords(), &e).unwrap();
            let minus = spec.exp(x.coords(), &(-e)).unwrap();
            let fd = (spec.log(mu.coords(), &plus).unwrap() - spec.log(mu.coords(), &minus).unwrap())
                / (2.0 * h);
            assert!((fd - jac.column(j)).amax() < 1e-7, "column {j}");
        }
    }

    #[test]
    fn log_jacobian_at_mean_is_identity() {
        let spec = ManifoldSpec::Sphere(3);
        let mu = ManifoldPoint::new_normalized(spec.clone(), DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5])).unwrap();
        let jac = spec.log_jacobian(mu.coords(), mu.coords()).unwrap();
        assert!((jac - DMatrix::identity(3, 3)).amax() < 1e-12);
    }
}
