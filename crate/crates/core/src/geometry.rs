//! Rigid-body geometry shared by every stage of the pipeline.
//!
//! Conventions: right-handed frames, millimetres, and transforms named
//! `a_from_b` map coordinates expressed in frame `b` into frame `a`.
//! The patient frame is the CT frame; the world frame is the tracking room.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on |q| accepted when reading a quaternion from outside.
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Positions and displacements share one representation.
pub type Point3 = Vec3;

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    /// Checked constructor for values arriving from outside the crate.
    pub fn try_new(x: f64, y: f64, z: f64) -> Result<Self> {
        let v = Vec3::new(x, y, z);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::invalid(format!("non-finite component in {v:?}")))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dot(&self, other: &Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm_squared(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(&self, other: &Vec3) -> f64 {
        (*self - *other).norm()
    }

    /// Unit vector in the same direction, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| *self / n)
    }

    pub fn component_mul(&self, other: &Vec3) -> Vec3 {
        Vec3::new(self.x * other.x, self.y * other.y, self.z * other.z)
    }

    pub fn max_component(&self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn lerp(&self, other: &Vec3, s: f64) -> Vec3 {
        *self + (*other - *self) * s
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_na(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_na(v: &Vector3<f64>) -> Self {
        Vec3::new(v.x, v.y, v.z)
    }

    /// Arithmetic mean, `None` when empty.
    pub fn centroid<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Vec3> {
        let (sum, n) = points
            .into_iter()
            .fold((Vec3::ZERO, 0usize), |(s, n), p| (s + *p, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

impl fmt::Debug for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Rotation quaternion `w + xi + yj + zk`, kept at unit norm.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes the raw components. Fails for zero or non-finite input.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::invalid(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(UnitQuaternion {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    fn renormalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        UnitQuaternion {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        if !angle.is_finite() || !axis.is_finite() {
            return Err(Error::invalid("non-finite axis or angle"));
        }
        match axis.normalized() {
            Some(u) => {
                let (s, c) = (0.5 * angle).sin_cos();
                Ok(UnitQuaternion::renormalized(c, u.x * s, u.y * s, u.z * s))
            }
            None if angle == 0.0 => Ok(UnitQuaternion::IDENTITY),
            None => Err(Error::invalid("zero rotation axis with nonzero angle")),
        }
    }

    /// Rotation whose axis is `v / |v|` and angle `|v|`.
    pub fn from_rotation_vector(v: Vec3) -> Self {
        let angle = v.norm();
        if angle < 1e-300 {
            return UnitQuaternion::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let u = v / angle;
        UnitQuaternion::renormalized(c, u.x * s, u.y * s, u.z * s)
    }

    /// Converts a proper rotation matrix (Shepperd's branch selection).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        UnitQuaternion::renormalized(w, x, y, z)
    }

    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        UnitQuaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * other`, renormalized.
    pub fn mul(&self, o: &UnitQuaternion) -> Self {
        UnitQuaternion::renormalized(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(&v) * 2.0;
        v + t * self.w + u.cross(&t)
    }

    /// Rotation angle in [0, π]. Uses atan2 so tiny angles keep precision.
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    /// Angle of the relative rotation between two quaternions. Insensitive
    /// to the sign of either argument.
    pub fn angle_to(&self, other: &UnitQuaternion) -> f64 {
        self.conjugate().mul(other).angle()
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shortest-arc spherical interpolation.
    pub fn slerp(&self, other: &UnitQuaternion, s: f64) -> Self {
        let mut o = *other;
        let mut cos = self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z;
        if cos < 0.0 {
            o = UnitQuaternion {
                w: -o.w,
                x: -o.x,
                y: -o.y,
                z: -o.z,
            };
            cos = -cos;
        }
        let (a, b) = if cos > 1.0 - 1e-12 {
            (1.0 - s, s)
        } else {
            let theta = cos.min(1.0).acos();
            let sin = theta.sin();
            (((1.0 - s) * theta).sin() / sin, (s * theta).sin() / sin)
        };
        UnitQuaternion::renormalized(
            a * self.w + b * o.w,
            a * self.x + b * o.x,
            a * self.y + b * o.y,
            a * self.z + b * o.z,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct RawTransform {
    rotation: [f64; 4],
    translation: Vec3,
}

/// Element of SE(3): rotate then translate.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawTransform", into = "RawTransform")]
pub struct RigidTransform {
    rotation: UnitQuaternion,
    translation: Vec3,
}

impl TryFrom<RawTransform> for RigidTransform {
    type Error = Error;

    fn try_from(raw: RawTransform) -> Result<Self> {
        let [w, x, y, z] = raw.rotation;
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::format(format!(
                "rotation quaternion norm {norm} is not unit"
            )));
        }
        if !raw.translation.is_finite() {
            return Err(Error::format("non-finite translation"));
        }
        // Stored bits are kept verbatim so persisted transforms reload exactly.
        Ok(RigidTransform {
            rotation: UnitQuaternion { w, x, y, z },
            translation: raw.translation,
        })
    }
}

impl From<RigidTransform> for RawTransform {
    fn from(t: RigidTransform) -> Self {
        RawTransform {
            rotation: t.rotation.wxyz(),
            translation: t.translation,
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: UnitQuaternion::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: UnitQuaternion, translation: Vec3) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        RigidTransform::new(UnitQuaternion::IDENTITY, translation)
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Result<Self> {
        if !translation.is_finite() {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(RigidTransform::new(
            UnitQuaternion::from_axis_angle(axis, angle)?,
            translation,
        ))
    }

    /// Builds from a rotation matrix assumed proper (det = +1).
    pub fn from_matrix_translation(rotation: &Matrix3<f64>, translation: Vec3) -> Self {
        RigidTransform::new(UnitQuaternion::from_matrix(rotation), translation)
    }

    pub fn rotation(&self) -> UnitQuaternion {
        self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.mul(&other.rotation),
            translation: self.rotation.rotate(other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = self.rotation.conjugate();
        RigidTransform {
            rotation: r,
            translation: -r.rotate(self.translation),
        }
    }

    pub fn apply_point(&self, p: Point3) -> Point3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        self.rotation.rotate(v)
    }

    /// Rotation angle (rad) and translation distance (mm) separating two
    /// transforms, measured as `self⁻¹ ∘ other`.
    pub fn difference(&self, other: &RigidTransform) -> (f64, f64) {
        (
            self.rotation.angle_to(&other.rotation),
            self.translation.distance(&other.translation),
        )
    }

    pub fn approx_eq(&self, other: &RigidTransform, angle_tol: f64, translation_tol: f64) -> bool {
        let (a, t) = self.difference(other);
        a <= angle_tol && t <= translation_tol
    }

    /// Linear interpolation of position and slerp of rotation.
    pub fn interpolate(&self, other: &RigidTransform, s: f64) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.slerp(&other.rotation, s),
            translation: self.translation.lerp(&other.translation, s),
        }
    }
}
