//! SO(3) and so(3) primitives.
//!
//! Rotations are stored as 3×3 matrices. Tangent vectors are plain
//! [`Vector3`] coordinates of so(3) under the `vee` isomorphism, so that
//! `hat(v) * w == v.cross(&w)`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3, Vector4};

use crate::error::{Error, Result};

/// Tolerance on the rotation-matrix invariants (`‖RᵀR − I‖_F`, `|det R − 1|`).
pub const ROTATION_TOL: f64 = 1e-9;

/// Below this angle `exp` and `log` switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Within this distance of π, `log` extracts the axis from the symmetric part.
pub const NEAR_PI: f64 = 1e-6;

/// Coordinates of an so(3) element; body angular velocity or an exponential
/// coordinate depending on context.
pub type Tangent = Vector3<f64>;

pub fn hat(v: &Tangent) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices whose symmetric part exceeds
/// [`ROTATION_TOL`].
pub fn vee(m: &Matrix3<f64>) -> Result<Tangent> {
    let asym = (m + m.transpose()).norm();
    let diag = m[(0, 0)].abs() + m[(1, 1)].abs() + m[(2, 2)].abs();
    if asym > ROTATION_TOL || diag > ROTATION_TOL {
        return Err(Error::NotSkew(asym.max(diag)));
    }
    Ok(Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

/// Which closed form `log` used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogBranch {
    SmallAngle,
    Regular,
    NearPi,
}

/// A 3×3 special orthogonal matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates the orthogonality and determinant invariants.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let r = Self(m);
        let orthogonality = r.orthogonality_defect();
        let det = m.determinant();
        if orthogonality > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::NotRotation { orthogonality, det });
        }
        Ok(r)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// `‖RᵀR − I‖_F`
    pub fn orthogonality_defect(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Rodrigues' formula.
    pub fn exp(v: &Tangent) -> Self {
        let theta2 = v.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(v);
        let (a, b) = if theta < SMALL_ANGLE {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Self(Matrix3::identity() + k * a + k * k * b)
    }

    pub fn log(&self) -> Tangent {
        self.log_with_branch().0
    }

    /// Principal logarithm, `‖v‖ ≤ π`, together with the branch taken.
    pub fn log_with_branch(&self) -> (Tangent, LogBranch) {
        let m = &self.0;
        let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // sin(θ)·axis
        let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5;
        let sin = s.norm();
        let theta = sin.atan2(cos);

        if theta < SMALL_ANGLE {
            return (s * (1.0 + theta * theta / 6.0), LogBranch::SmallAngle);
        }
        if std::f64::consts::PI - theta < NEAR_PI {
            // (R + Rᵀ)/2 − cosθ·I = (1 − cosθ)·n nᵀ
            let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos;
            let one_minus_cos = 1.0 - cos;
            let i = (0..3).max_by(|&a, &c| b[(a, a)].total_cmp(&b[(c, c)])).unwrap_or(0);
            let mut axis: Vector3<f64> = b.column(i).into_owned() / (b[(i, i)] * one_minus_cos).sqrt();
            axis.normalize_mut();
            if axis.dot(&s) < 0.0 {
                axis = -axis;
            }
            return (axis * theta, LogBranch::NearPi);
        }
        (s * (theta / sin), LogBranch::Regular)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// `self⁻¹ · v`
    pub fn inverse_rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.tr_mul(v)
    }

    pub fn to_quaternion(&self) -> UnitQuaternion {
        to_quaternion(self)
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul for &Rotation {
    type Output = Rotation;

    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

pub fn exp_so3(v: &Tangent) -> Rotation {
    Rotation::exp(v)
}

pub fn log_so3(r: &Rotation) -> Tangent {
    r.log()
}

/// Nearest rotation in Frobenius norm: the orthogonal polar factor with the
/// determinant forced to +1.
pub fn project_so3(m: &Matrix3<f64>) -> Result<Rotation> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::Projection("non-finite entries"));
    }
    if m.determinant() <= 0.0 {
        return Err(Error::Projection("determinant is not positive"));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Projection("singular value decomposition failed")),
    };
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-12 * smax {
        return Err(Error::Projection("matrix is singular"));
    }
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    Ok(Rotation(r))
}

/// Unit quaternion `w + xi + yj + zk`. `q` and `-q` are the same rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Normalizes `(w, x, y, z)`; `None` for a zero or non-finite vector.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return None;
        }
        Some(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize() * (0.5 * angle).sin();
        Self { w: (0.5 * angle).cos(), x: a.x, y: a.y, z: a.z }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn neg(&self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Representative with `w ≥ 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            self.neg()
        } else {
            *self
        }
    }

    pub fn to_rotation(&self) -> Rotation {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Rotation(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    /// Hamilton product.
    fn mul(self, q: UnitQuaternion) -> UnitQuaternion {
        let p = self;
        UnitQuaternion {
            w: p.w * q.w - p.x * q.x - p.y * q.y - p.z * q.z,
            x: p.w * q.x + p.x * q.w + p.y * q.z - p.z * q.y,
            y: p.w * q.y - p.x * q.z + p.y * q.w + p.z * q.x,
            z: p.w * q.z + p.x * q.y - p.y * q.x + p.z * q.w,
        }
    }
}

/// Quaternion of `r` with `w ≥ 0`.
pub fn to_quaternion(r: &Rotation) -> UnitQuaternion {
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r.0));
    UnitQuaternion { w: q.w, x: q.i, y: q.j, z: q.k }.canonical()
}

/// Weighted rotation average: dominant eigenvector of `Σ wᵢ qᵢ qᵢᵀ`.
///
/// The result does not depend on the sign of any input quaternion. Weights
/// need not be normalized but must be nonnegative with a positive sum.
pub fn weighted_quaternion_mean(qs: &[UnitQuaternion], ws: &[f64]) -> Result<UnitQuaternion> {
    if qs.is_empty() {
        return Err(Error::InvalidInput("no quaternions to average".into()));
    }
    if qs.len() != ws.len() {
        return Err(Error::InvalidInput(format!("{} quaternions but {} weights", qs.len(), ws.len())));
    }
    if ws.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::InvalidInput("weights must be nonnegative".into()));
    }
    let total: f64 = ws.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    let mut acc = Matrix4::<f64>::zeros();
    for (q, &w) in qs.iter().zip(ws) {
        if w == 0.0 {
            continue;
        }
        let v = q.as_vector();
        acc += v * v.transpose() * (w / total);
    }
    let eig = acc.symmetric_eigen();
    let imax = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(imax);
    UnitQuaternion::new_normalize(v[0], v[1], v[2], v[3]).map(|q| q.canonical()).ok_or(Error::ZeroWeights)
}

/// Angle of `q̄⁻¹ ⊗ q*` in degrees, in `[0, 180]`.
pub fn rotation_angle_error(q_bar: &UnitQuaternion, q_star: &UnitQuaternion) -> f64 {
    let delta = q_bar.conjugate() * *q_star;
    let c = delta.w.abs().min(1.0);
    2.0 * c.acos().to_degrees()
}
