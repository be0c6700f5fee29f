//! Rigid-body pose algebra.
//!
//! Rotations are stored as proper orthonormal 3x3 matrices (row-major).
//! Euler angles follow the intrinsic X-Y-Z convention: `R = Rx(a) * Ry(b) * Rz(c)`.
//! Internal units are meters and radians; millimeters and degrees only
//! appear in the text renderings at the bottom of this module.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Vec3<T>(pub [T; 3]);

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3([x, y, z])
    }

    pub fn zeros() -> Self {
        Vec3([T::zero(); 3])
    }

    pub fn unit_x() -> Self {
        Self::new(T::one(), T::zero(), T::zero())
    }

    pub fn unit_y() -> Self {
        Self::new(T::zero(), T::one(), T::zero())
    }

    pub fn unit_z() -> Self {
        Self::new(T::zero(), T::zero(), T::one())
    }

    pub fn x(&self) -> T {
        self.0[0]
    }

    pub fn y(&self) -> T {
        self.0[1]
    }

    pub fn z(&self) -> T {
        self.0[2]
    }

    pub fn dot(&self, o: &Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(&self, o: &Self) -> Self {
        let [a, b, c] = self.0;
        let [d, e, f] = o.0;
        Self::new(b * f - c * e, c * d - a * f, a * e - b * d)
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn norm_l1(&self) -> T {
        self.0[0].abs() + self.0[1].abs() + self.0[2].abs()
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.0[0] * s, self.0[1] * s, self.0[2] * s)
    }

    /// Unit vector, or `None` when the norm is not above `eps`.
    pub fn normalized(&self, eps: T) -> Option<Self> {
        let n = self.norm();
        (n > eps).then(|| self.scale(T::one() / n))
    }

    pub fn distance(&self, o: &Self) -> T {
        (*self - *o).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Vec3<U> {
        Vec3(self.0.map(|v| U::lit(v.to_f64_lossy())))
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2])
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2])
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.0[0], -self.0[1], -self.0[2])
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Mat3<T>(pub [[T; 3]; 3]);

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Mat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Mat3([[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]])
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut r = [[T::zero(); 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.0[i][0] * o.0[0][j] + self.0[i][1] * o.0[1][j] + self.0[i][2] * o.0[2][j];
            }
        }
        Mat3(r)
    }

    pub fn mul_vec(&self, v: &Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.0[0] + m[0][1] * v.0[1] + m[0][2] * v.0[2],
            m[1][0] * v.0[0] + m[1][1] * v.0[1] + m[1][2] * v.0[2],
            m[2][0] * v.0[0] + m[2][1] * v.0[1] + m[2][2] * v.0[2],
        )
    }

    pub fn determinant(&self) -> T {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn trace(&self) -> T {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn frobenius_distance(&self, o: &Self) -> T {
        let mut acc = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let d = self.0[i][j] - o.0[i][j];
                acc = acc + d * d;
            }
        }
        acc.sqrt()
    }
}

/// Unit quaternion `(w, x, y, z)`; only used for interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quaternion<T> {
    pub fn dot(&self, o: &Self) -> T {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    fn normalized(self) -> Self {
        let n = self.dot(&self).sqrt();
        Quaternion { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    /// Spherical linear interpolation along the shorter arc.
    pub fn slerp(&self, other: &Self, s: T) -> Self {
        let mut b = *other;
        let mut cos = self.dot(&b);
        if cos < T::zero() {
            b = Quaternion { w: -b.w, x: -b.x, y: -b.y, z: -b.z };
            cos = -cos;
        }
        let (wa, wb) = if cos > T::lit(1.0 - 1e-12) {
            (T::one() - s, s)
        } else {
            let theta = cos.min(T::one()).acos();
            let sin = theta.sin();
            (((T::one() - s) * theta).sin() / sin, (s * theta).sin() / sin)
        };
        Quaternion {
            w: wa * self.w + wb * b.w,
            x: wa * self.x + wb * b.x,
            y: wa * self.y + wb * b.y,
            z: wa * self.z + wb * b.z,
        }
        .normalized()
    }
}

/// Proper rotation in 3D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
#[serde(transparent)]
pub struct Rotation<T> {
    matrix: Mat3<T>,
}

impl<T: Real> Default for Rotation<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Rotation { matrix: Mat3::identity() }
    }

    /// Wraps a matrix that the caller guarantees is orthonormal with det +1.
    pub fn from_matrix_unchecked(matrix: Mat3<T>) -> Self {
        Rotation { matrix }
    }

    pub fn matrix(&self) -> &Mat3<T> {
        &self.matrix
    }

    /// Rodrigues' formula. A zero axis yields the identity.
    pub fn from_axis_angle(axis: &Vec3<T>, angle: T) -> Self {
        let Some(k) = axis.normalized(T::zero()) else {
            return Self::identity();
        };
        let (s, c) = angle.sin_cos();
        let t = T::one() - c;
        let [x, y, z] = k.0;
        Rotation {
            matrix: Mat3([
                [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
                [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
                [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
            ]),
        }
    }

    pub fn from_rotation_vector(v: &Vec3<T>) -> Self {
        let angle = v.norm();
        if angle == T::zero() {
            return Self::identity();
        }
        Self::from_axis_angle(v, angle)
    }

    pub fn rx(angle: T) -> Self {
        Self::from_axis_angle(&Vec3::unit_x(), angle)
    }

    pub fn ry(angle: T) -> Self {
        Self::from_axis_angle(&Vec3::unit_y(), angle)
    }

    pub fn rz(angle: T) -> Self {
        Self::from_axis_angle(&Vec3::unit_z(), angle)
    }

    pub fn rz_deg(deg: T) -> Self {
        Self::rz(deg.to_radians())
    }

    /// Intrinsic X-Y-Z Euler angles in degrees: `Rx(a) * Ry(b) * Rz(c)`.
    pub fn from_euler_deg(angles: [T; 3]) -> Self {
        let [a, b, c] = angles.map(|v| v.to_radians());
        Self::rx(a).compose(&Self::ry(b)).compose(&Self::rz(c))
    }

    /// Inverse of [`Rotation::from_euler_deg`].
    ///
    /// At gimbal lock (`|pitch| = 90`) the roll/yaw split is not unique; the
    /// canonical representative has yaw = 0 and all rotation folded into roll.
    pub fn euler_deg(&self) -> [T; 3] {
        let m = &self.matrix.0;
        let sb = m[0][2].max(-T::one()).min(T::one());
        let b = sb.asin();
        let lock = T::one() - sb.abs() < T::lit(1e-12);
        let (a, c) = if lock {
            (m[2][1].atan2(m[1][1]), T::zero())
        } else {
            ((-m[1][2]).atan2(m[2][2]), (-m[0][1]).atan2(m[0][0]))
        };
        [a.to_degrees(), b.to_degrees(), c.to_degrees()]
    }

    pub fn inverse(&self) -> Self {
        Rotation { matrix: self.matrix.transpose() }
    }

    /// `self * other`.
    pub fn compose(&self, other: &Self) -> Self {
        Rotation { matrix: self.matrix.mul_mat(&other.matrix) }
    }

    pub fn rotate(&self, v: &Vec3<T>) -> Vec3<T> {
        self.matrix.mul_vec(v)
    }

    pub fn to_quaternion(&self) -> Quaternion<T> {
        let m = &self.matrix.0;
        let (one, two, quarter) = (T::one(), T::lit(2.0), T::lit(0.25));
        let tr = self.matrix.trace();
        let q = if tr > T::zero() {
            let s = (tr + one).sqrt() * two;
            Quaternion {
                w: quarter * s,
                x: (m[2][1] - m[1][2]) / s,
                y: (m[0][2] - m[2][0]) / s,
                z: (m[1][0] - m[0][1]) / s,
            }
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * two;
            Quaternion {
                w: (m[2][1] - m[1][2]) / s,
                x: quarter * s,
                y: (m[0][1] + m[1][0]) / s,
                z: (m[0][2] + m[2][0]) / s,
            }
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * two;
            Quaternion {
                w: (m[0][2] - m[2][0]) / s,
                x: (m[0][1] + m[1][0]) / s,
                y: quarter * s,
                z: (m[1][2] + m[2][1]) / s,
            }
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * two;
            Quaternion {
                w: (m[1][0] - m[0][1]) / s,
                x: (m[0][2] + m[2][0]) / s,
                y: (m[1][2] + m[2][1]) / s,
                z: quarter * s,
            }
        };
        q.normalized()
    }

    pub fn from_quaternion(q: &Quaternion<T>) -> Self {
        let q = q.normalized();
        let two = T::lit(2.0);
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        Rotation {
            matrix: Mat3([
                [T::one() - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
                [two * (x * y + w * z), T::one() - two * (x * x + z * z), two * (y * z - w * x)],
                [two * (x * z - w * y), two * (y * z + w * x), T::one() - two * (x * x + y * y)],
            ]),
        }
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> T {
        let q = self.to_quaternion();
        let v = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        T::lit(2.0) * v.atan2(q.w.abs())
    }

    /// Axis-angle vector (log map), angle in `[0, pi]`.
    pub fn rotation_vector(&self) -> Vec3<T> {
        let mut q = self.to_quaternion();
        if q.w < T::zero() {
            q = Quaternion { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
        }
        let v = Vec3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s == T::zero() {
            return Vec3::zeros();
        }
        let angle = T::lit(2.0) * s.atan2(q.w);
        v.scale(angle / s)
    }

    /// Shortest-arc interpolation from `self` (s = 0) to `other` (s = 1).
    pub fn slerp(&self, other: &Self, s: T) -> Self {
        let rel = self.inverse().compose(other);
        let step = Self::from_rotation_vector(&rel.rotation_vector().scale(s));
        self.compose(&step)
    }

    /// Heading of the rotated x-axis projected on the world xy-plane.
    pub fn yaw(&self) -> T {
        let x = self.rotate(&Vec3::unit_x());
        x.y().atan2(x.x())
    }

    pub fn distance(&self, other: &Self) -> T {
        self.matrix.frobenius_distance(&other.matrix)
    }

    /// Orthonormality residual `|R R^T - I|_F` and determinant.
    pub fn orthonormality(&self) -> (T, T) {
        let rrt = self.matrix.mul_mat(&self.matrix.transpose());
        (rrt.frobenius_distance(&Mat3::identity()), self.matrix.determinant())
    }

    pub fn cast<U: Real>(&self) -> Rotation<U> {
        Rotation { matrix: Mat3(self.matrix.0.map(|row| row.map(|v| U::lit(v.to_f64_lossy())))) }
    }
}

/// Rotation relative to `home` as used in prompt text: `home^-1 * r`.
pub fn relative_rotation_from_home<T: Real>(r: &Rotation<T>, home: &Rotation<T>) -> Rotation<T> {
    home.inverse().compose(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Pose<T> {
    /// Meters.
    pub position: Vec3<T>,
    pub rotation: Rotation<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(position: Vec3<T>, rotation: Rotation<T>) -> Self {
        Pose { position, rotation }
    }

    pub fn from_position(position: Vec3<T>) -> Self {
        Pose { position, rotation: Rotation::identity() }
    }

    pub fn identity() -> Self {
        Pose { position: Vec3::zeros(), rotation: Rotation::identity() }
    }

    /// Treats both poses as rigid frames: `self * other`.
    pub fn compose(&self, other: &Self) -> Self {
        Pose {
            position: self.position + self.rotation.rotate(&other.position),
            rotation: self.rotation.compose(&other.rotation),
        }
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Pose { position: -r.rotate(&self.position), rotation: r }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.rotation.matrix.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose { position: self.position.cast(), rotation: self.rotation.cast() }
    }
}

/// Similarity transform `p -> scale * R * p + t`; rigid when `scale == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct RigidTransform<T> {
    pub rotation: Rotation<T>,
    pub translation: Vec3<T>,
    pub scale: T,
}

impl<T: Real> Default for RigidTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        RigidTransform { rotation: Rotation::identity(), translation: Vec3::zeros(), scale: T::one() }
    }

    pub fn translation(t: Vec3<T>) -> Self {
        RigidTransform { translation: t, ..Self::identity() }
    }

    pub fn rotation(r: Rotation<T>) -> Self {
        RigidTransform { rotation: r, ..Self::identity() }
    }

    pub fn is_rigid(&self) -> bool {
        self.scale == T::one()
    }

    pub fn apply_point(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation.rotate(p).scale(self.scale) + self.translation
    }

    /// Position is transformed as a point; rotation is left-multiplied by `R`.
    pub fn apply(&self, p: &Pose<T>) -> Pose<T> {
        Pose { position: self.apply_point(&p.position), rotation: self.rotation.compose(&p.rotation) }
    }

    /// `compose(a, b)(p) == a(b(p))`.
    pub fn compose(&self, b: &Self) -> Self {
        RigidTransform {
            rotation: self.rotation.compose(&b.rotation),
            translation: self.rotation.rotate(&b.translation).scale(self.scale) + self.translation,
            scale: self.scale * b.scale,
        }
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        let inv_s = T::one() / self.scale;
        RigidTransform { rotation: r, translation: -r.rotate(&self.translation).scale(inv_s), scale: inv_s }
    }
}

pub fn compose<T: Real>(a: &RigidTransform<T>, b: &RigidTransform<T>) -> RigidTransform<T> {
    a.compose(b)
}

pub fn apply<T: Real>(t: &RigidTransform<T>, p: &Pose<T>) -> Pose<T> {
    t.apply(p)
}

/// `[x, y, z]` in millimeters, 3 decimals.
pub fn format_position_mm<T: Real>(p: &Vec3<T>) -> String {
    let mm = p.0.map(|v| v.to_f64_lossy() * 1000.0);
    format!("[{:.3}, {:.3}, {:.3}]", mm[0], mm[1], mm[2])
}

/// `[a, b, c]` intrinsic X-Y-Z Euler degrees, 2 decimals.
pub fn format_euler_deg<T: Real>(r: &Rotation<T>) -> String {
    let e = r.euler_deg().map(|v| {
        let v = v.to_f64_lossy();
        // keep "-0.00" out of prompts
        if v.abs() < 0.005 {
            0.0
        } else {
            v
        }
    });
    format!("[{:.2}, {:.2}, {:.2}]", e[0], e[1], e[2])
}

/// Text rendering used in prompts and summaries. When `home` is given, the
/// rotation is reported relative to it.
pub fn format_pose<T: Real>(p: &Pose<T>, home: Option<&Rotation<T>>) -> String {
    let rot = match home {
        Some(h) => relative_rotation_from_home(&p.rotation, h),
        None => p.rotation,
    };
    format!("pos_mm={} euler_deg={}", format_position_mm(&p.position), format_euler_deg(&rot))
}
