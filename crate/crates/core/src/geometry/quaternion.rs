use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Quaternion stored as (w, x, y, z).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

const UNIT_TOLERANCE: f64 = 1e-6;

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Unit-norm representative with `w >= 0`; when `w == 0` the first
    /// nonzero imaginary component is made positive.
    pub fn canonicalize(&self) -> Result<Quaternion> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidQuaternion(format!(
                "cannot normalize {:?} (norm {n})",
                self.to_array()
            )));
        }
        // Skipping the rescale for norms within a few ulps of one keeps this idempotent.
        let u = if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            *self
        } else {
            self.scale(1.0 / n)
        };
        Ok(if canonical_sign(&u) < 0.0 {
            u.scale(-1.0)
        } else {
            u
        })
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_rotation(&self) -> Result<Matrix3<f64>> {
        if !self.is_finite() || !self.is_unit() {
            return Err(Error::InvalidQuaternion(format!(
                "expected unit quaternion, got norm {}",
                self.norm()
            )));
        }
        Ok(rotation_matrix(self))
    }

    /// Canonical quaternion of a rotation matrix (Shepperd's method).
    pub fn from_rotation(m: &Matrix3<f64>) -> Quaternion {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.canonicalize().unwrap_or(Quaternion::IDENTITY)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        rotation_matrix(self) * v
    }
}

/// +1 when `q` is already in the canonical hemisphere, -1 otherwise.
fn canonical_sign(q: &Quaternion) -> f64 {
    for c in [q.w, q.x, q.y, q.z] {
        if c > 0.0 {
            return 1.0;
        }
        if c < 0.0 {
            return -1.0;
        }
    }
    1.0
}

/// Rotation matrix of `q` assuming it is unit; no validation.
pub(crate) fn rotation_matrix(q: &Quaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
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

/// Partial derivatives of [`rotation_matrix`] with respect to (w, x, y, z).
pub(crate) fn rotation_matrix_partials(q: &Quaternion) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Pull a gradient on the normalized quaternion `raw / |raw|` back onto `raw`.
pub(crate) fn normalize_backward(raw: &[f64; 4], grad_unit: &[f64; 4]) -> [f64; 4] {
    let n = (raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let u = raw.map(|v| v / n);
    let proj: f64 = u.iter().zip(grad_unit).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|i| (grad_unit[i] - u[i] * proj) / n)
}

/// Pull a gradient on `canonicalize(raw)` back onto `raw`.
pub(crate) fn canonicalize_backward(raw: &[f64; 4], grad_canonical: &[f64; 4]) -> [f64; 4] {
    let q = Quaternion::from_array(*raw);
    let sign = canonical_sign(&q);
    let g = grad_canonical.map(|v| v * sign);
    normalize_backward(raw, &g)
}
