//! Low-dimensional linear algebra and the state types shared by every other
//! module: free vectors, points of S², elements of so(3) and SO(3), and
//! points of the tangent bundle TS².
//!
//! All tolerances are fixed library constants.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-norm tolerance carried by integrator iterates.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Window inside which [`UnitVector3::new`] normalizes its input.
pub const UNIT_ACCEPT_TOL: f64 = 1e-9;
/// Tolerance for ⟨p, ξ⟩ = 0 on TS².
pub const TANGENT_TOL: f64 = 1e-10;
/// Tolerance for RᵀR = I and det R = 1.
pub const ROTATION_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vector3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vector3 {
    pub const ZERO: Vector3 = Vector3::new(0.0, 0.0, 0.0);
    pub const E_X: Vector3 = Vector3::new(1.0, 0.0, 0.0);
    pub const E_Y: Vector3 = Vector3::new(0.0, 1.0, 0.0);
    pub const E_Z: Vector3 = Vector3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub const fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, other: Vector3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    #[inline]
    pub fn cross(self, other: Vector3) -> Vector3 {
        cross(self, other)
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Sup-norm distance, convenient for component-wise tolerances.
    pub fn max_abs_diff(self, other: Vector3) -> f64 {
        (self.x - other.x)
            .abs()
            .max((self.y - other.y).abs())
            .max((self.z - other.z).abs())
    }

    pub fn normalized(self) -> Option<Vector3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub(crate) fn to_na(self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.x, self.y, self.z)
    }

    pub(crate) fn from_na(v: &nalgebra::Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<[f64; 3]> for Vector3 {
    fn from(a: [f64; 3]) -> Self {
        Vector3::from_array(a)
    }
}

impl From<Vector3> for [f64; 3] {
    fn from(v: Vector3) -> Self {
        v.to_array()
    }
}

impl Add for Vector3 {
    type Output = Vector3;
    #[inline]
    fn add(self, o: Vector3) -> Vector3 {
        Vector3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vector3 {
    type Output = Vector3;
    #[inline]
    fn sub(self, o: Vector3) -> Vector3 {
        Vector3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vector3 {
    type Output = Vector3;
    #[inline]
    fn neg(self) -> Vector3 {
        Vector3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vector3 {
    type Output = Vector3;
    #[inline]
    fn mul(self, s: f64) -> Vector3 {
        Vector3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vector3> for f64 {
    type Output = Vector3;
    #[inline]
    fn mul(self, v: Vector3) -> Vector3 {
        v * self
    }
}

impl AddAssign for Vector3 {
    fn add_assign(&mut self, o: Vector3) {
        *self = *self + o;
    }
}

impl SubAssign for Vector3 {
    fn sub_assign(&mut self, o: Vector3) {
        *self = *self - o;
    }
}

/// a × b.
#[inline]
pub fn cross(a: Vector3, b: Vector3) -> Vector3 {
    Vector3::new(
        a.y * b.z - a.z * b.y,
        a.z * b.x - a.x * b.z,
        a.x * b.y - a.y * b.x,
    )
}

/// A point of S².
///
/// User-facing construction normalizes inputs whose norm is within
/// [`UNIT_ACCEPT_TOL`] of one and rejects anything else. Integrator iterates
/// are stored exactly as computed, so constraint drift stays observable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(into = "[f64; 3]")]
pub struct UnitVector3(Vector3);

impl UnitVector3 {
    pub fn new(v: Vector3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_ACCEPT_TOL {
            return Err(Error::domain(format!(
                "vector {:?} has norm {n}, not within {UNIT_ACCEPT_TOL:e} of 1",
                v.to_array()
            )));
        }
        Ok(Self(v * (1.0 / n)))
    }

    /// Normalizes any nonzero vector.
    pub fn from_direction(v: Vector3) -> Result<Self> {
        v.normalized()
            .map(Self)
            .ok_or_else(|| Error::domain("cannot normalize a zero vector"))
    }

    /// Wraps an integrator iterate without renormalizing it.
    pub(crate) fn from_iterate(v: Vector3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_ACCEPT_TOL {
            return Err(Error::domain(format!(
                "iterate left the sphere: |z| = {n}"
            )));
        }
        Ok(Self(v))
    }

    pub const fn e_x() -> Self {
        Self(Vector3::E_X)
    }

    pub const fn e_y() -> Self {
        Self(Vector3::E_Y)
    }

    pub const fn e_z() -> Self {
        Self(Vector3::E_Z)
    }

    #[inline]
    pub fn vector(self) -> Vector3 {
        self.0
    }

    pub fn x(self) -> f64 {
        self.0.x
    }

    pub fn y(self) -> f64 {
        self.0.y
    }

    pub fn z(self) -> f64 {
        self.0.z
    }

    pub fn dot(self, v: Vector3) -> f64 {
        self.0.dot(v)
    }

    /// | |z| − 1 |.
    pub fn norm_defect(self) -> f64 {
        (self.0.norm() - 1.0).abs()
    }
}

impl From<UnitVector3> for Vector3 {
    fn from(u: UnitVector3) -> Vector3 {
        u.0
    }
}

impl From<UnitVector3> for [f64; 3] {
    fn from(u: UnitVector3) -> [f64; 3] {
        u.0.to_array()
    }
}

impl<'de> Deserialize<'de> for UnitVector3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        UnitVector3::new(Vector3::from_array(a)).map_err(serde::de::Error::custom)
    }
}

/// An element of so(3), stored by its axis vector (a, b, c):
///
/// ```text
/// [[ 0, -c,  b],
///  [ c,  0, -a],
///  [-b,  a,  0]]
/// ```
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AntisymMatrix3 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl AntisymMatrix3 {
    pub const ZERO: AntisymMatrix3 = AntisymMatrix3 {
        a: 0.0,
        b: 0.0,
        c: 0.0,
    };

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            0.0, -self.c, self.b, //
            self.c, 0.0, -self.a, //
            -self.b, self.a, 0.0,
        )
    }

    /// Reads the axis back from a matrix, ignoring the symmetric part.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self {
            a: 0.5 * (m[(2, 1)] - m[(1, 2)]),
            b: 0.5 * (m[(0, 2)] - m[(2, 0)]),
            c: 0.5 * (m[(1, 0)] - m[(0, 1)]),
        }
    }

    pub fn axis(&self) -> Vector3 {
        unhat(self)
    }

    /// M·v = axis × v.
    pub fn apply(&self, v: Vector3) -> Vector3 {
        cross(self.axis(), v)
    }

    pub fn scale(&self, s: f64) -> Self {
        hat(self.axis() * s)
    }

    pub fn is_zero(&self) -> bool {
        self.a == 0.0 && self.b == 0.0 && self.c == 0.0
    }
}

impl Add for AntisymMatrix3 {
    type Output = AntisymMatrix3;
    fn add(self, o: AntisymMatrix3) -> AntisymMatrix3 {
        hat(self.axis() + o.axis())
    }
}

impl Sub for AntisymMatrix3 {
    type Output = AntisymMatrix3;
    fn sub(self, o: AntisymMatrix3) -> AntisymMatrix3 {
        hat(self.axis() - o.axis())
    }
}

pub fn hat(v: Vector3) -> AntisymMatrix3 {
    AntisymMatrix3 {
        a: v.x,
        b: v.y,
        c: v.z,
    }
}

pub fn unhat(m: &AntisymMatrix3) -> Vector3 {
    Vector3::new(m.a, m.b, m.c)
}

/// ρ = (½‖B‖²_F)^{1/2}.
pub fn rho(b: &AntisymMatrix3) -> f64 {
    (0.5 * b.matrix().norm_squared()).sqrt()
}

/// An element of SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let r = Self(m);
        let (orth, det) = (r.orthogonality_defect(), r.determinant_defect());
        if !(orth <= ROTATION_TOL && det <= ROTATION_TOL) {
            return Err(Error::domain(format!(
                "matrix is not in SO(3): ‖RᵀR − I‖ = {orth:e}, |det R − 1| = {det:e}"
            )));
        }
        Ok(r)
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|i, j| rows[i][j]))
    }

    /// Wraps a product of rotations without re-validation.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// Entries in row-major order (the 9 ambient coordinates z_jk).
    pub fn entries(&self) -> [f64; 9] {
        let r = self.rows();
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ]
    }

    pub fn compose(&self, other: &Rotation3) -> Rotation3 {
        Rotation3(self.0 * other.0)
    }

    pub fn transpose(&self) -> Rotation3 {
        Rotation3(self.0.transpose())
    }

    pub fn apply(&self, v: Vector3) -> Vector3 {
        Vector3::from_na(&(self.0 * v.to_na()))
    }

    /// Rotating a unit vector keeps it unit up to the rotation's own defect.
    pub fn rotate(&self, u: UnitVector3) -> UnitVector3 {
        UnitVector3(self.apply(u.vector()))
    }

    /// ‖RᵀR − I‖_F.
    pub fn orthogonality_defect(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    /// |det R − 1|.
    pub fn determinant_defect(&self) -> f64 {
        (self.0.determinant() - 1.0).abs()
    }

    /// Max-entry distance.
    pub fn max_abs_diff(&self, other: &Rotation3) -> f64 {
        (self.0 - other.0).amax()
    }
}

/// A point (p, ξ) of TS².
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TangentState {
    pub p: UnitVector3,
    pub xi: Vector3,
}

impl TangentState {
    pub fn new(p: UnitVector3, xi: Vector3) -> Result<Self> {
        let inner = p.dot(xi);
        if inner.abs() > TANGENT_TOL * xi.norm().max(1.0) {
            return Err(Error::domain(format!(
                "ξ is not tangent at p: ⟨p, ξ⟩ = {inner:e}"
            )));
        }
        Ok(Self { p, xi })
    }

    /// Speed |ξ|.
    pub fn speed(&self) -> f64 {
        self.xi.norm()
    }
}

/// Normalizes p and removes the normal component of ξ.
///
/// Idempotent; a zero-length p is a domain error.
pub fn project_tangent(p: Vector3, xi: Vector3) -> Result<TangentState> {
    let p = UnitVector3::from_direction(p)?;
    let n = p.vector();
    let mut t = xi - n * n.dot(xi);
    // A second pass pushes ⟨p, ξ⟩ down to rounding level.
    t -= n * n.dot(t);
    Ok(TangentState { p, xi: t })
}
