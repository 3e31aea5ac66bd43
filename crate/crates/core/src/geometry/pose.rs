use nalgebra::{Matrix3, Matrix4, Vector3};

use super::quaternion::{rotation_matrix, Quaternion};
use crate::error::{Error, Result};

/// Rigid transform `p_dst = R * p_src + t`.
///
/// For cameras this is always camera-to-world (equivalently camera-to-canonical):
/// it maps camera-frame points into the reference frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub const IDENTITY: RelativePose = RelativePose {
        rotation: Quaternion::IDENTITY,
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    /// Builds a pose, canonicalizing the rotation.
    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Result<Self> {
        Ok(Self {
            rotation: rotation.canonicalize()?,
            translation,
        })
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Quaternion::from_rotation(r),
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn inverse(&self) -> RelativePose {
        let rot = self.rotation.conjugate();
        let canonical = rot.canonicalize().unwrap_or(Quaternion::IDENTITY);
        let t = -(rotation_matrix(&rot) * self.translation);
        RelativePose {
            rotation: canonical,
            translation: t,
        }
    }

    /// `self ∘ rhs`: first apply `rhs`, then `self`.
    pub fn compose(&self, rhs: &RelativePose) -> RelativePose {
        let rot = self.rotation.mul(&rhs.rotation);
        RelativePose {
            rotation: rot.canonicalize().unwrap_or(Quaternion::IDENTITY),
            translation: self.rotation_matrix() * rhs.translation + self.translation,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let r = self.rotation_matrix();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "pose block is not a rotation (orthogonality error {orth:e})"
            )));
        }
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into();
        Ok(Self::from_rotation_matrix(&r, t))
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Geodesic angle between the rotations of two poses, in `[0, π]`.
pub fn rotation_angle_between(a: &RelativePose, b: &RelativePose) -> f64 {
    let d = a.rotation.dot(&b.rotation).abs().min(1.0);
    2.0 * d.acos()
}
