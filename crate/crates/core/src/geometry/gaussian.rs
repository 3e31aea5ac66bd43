use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::camera::CameraView;
use super::quaternion::{rotation_matrix, Quaternion};
use crate::error::{Error, Result};

/// Low-pass dilation added to both diagonal entries of every projected covariance, in px².
pub const COV2D_DILATION: f64 = 0.3;

/// Camera-space depth below which a gaussian is culled.
pub const Z_NEAR: f64 = 0.01;

/// A 3D gaussian carrying appearance and an N-dimensional semantic feature.
///
/// `color` is the degree-0 spherical-harmonics coefficient (plain RGB).
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGaussian3D {
    pub mu: Vector3<f64>,
    pub rot: Quaternion,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub feat: Vec<f64>,
}

impl SemanticGaussian3D {
    /// Checks the parameter-range invariants. `index` is only used for the error message.
    pub fn validate(&self, index: usize, feature_dim: usize) -> Result<()> {
        let err = |reason: String| Err(Error::InvalidGaussian { index, reason });
        let finite = self.mu.iter().all(|v| v.is_finite())
            && self.rot.is_finite()
            && self.scale.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.color.iter().all(|v| v.is_finite())
            && self.feat.iter().all(|v| v.is_finite());
        if !finite {
            return err("non-finite parameter".into());
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return err(format!("non-positive scale {:?}", self.scale.as_slice()));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return err(format!("opacity {} outside (0, 1)", self.opacity));
        }
        if self.rot.norm() == 0.0 {
            return err("zero rotation quaternion".into());
        }
        if self.feat.len() != feature_dim {
            return err(format!(
                "feature dimension {} (expected {feature_dim})",
                self.feat.len()
            ));
        }
        Ok(())
    }
}

/// Σ = R diag(s²) Rᵀ. The rotation is normalized first; only its direction matters.
pub fn covariance_from(scale: &Vector3<f64>, rot: &Quaternion) -> Result<Matrix3<f64>> {
    if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidGaussian {
            index: 0,
            reason: format!("non-positive scale {:?}", scale.as_slice()),
        });
    }
    let n = rot.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidQuaternion("zero-norm rotation".into()));
    }
    let r = rotation_matrix(&rot.scale(1.0 / n));
    let m = r * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

/// Screen-space footprint of one gaussian plus the intermediates its backward pass needs.
#[derive(Clone, Debug)]
pub struct ProjectedGaussian {
    /// Pixel coordinates of the projected center.
    pub mean2d: [f64; 2],
    /// Dilated 2D covariance.
    pub cov2d: Matrix2<f64>,
    /// Camera-space z of the center.
    pub depth: f64,
    pub cam_point: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub cov3d: Matrix3<f64>,
}

impl ProjectedGaussian {
    /// 2D covariance before the low-pass dilation.
    pub fn cov2d_undilated(&self) -> Matrix2<f64> {
        self.cov2d - Matrix2::identity() * COV2D_DILATION
    }
}

/// EWA projection of a gaussian. `None` when the center is at or behind the near plane.
pub fn project_gaussian(
    g: &SemanticGaussian3D,
    cam: &CameraView,
) -> Result<Option<ProjectedGaussian>> {
    let cov3d = covariance_from(&g.scale, &g.rot)?;
    let w = cam.world_to_camera_rotation();
    let t = w * (g.mu - cam.pose.translation);
    Ok(project_with(t, cov3d, &w, cam))
}

/// Fraction of the image half-size by which the Jacobian guard band extends
/// beyond the frame on each side.
pub const JACOBIAN_GUARD: f64 = 0.3;

/// `x/z` and `y/z` clamped to the guard band used when evaluating the
/// projection Jacobian, plus whether each ratio was clamped. Far off-screen
/// gaussians close to the camera plane would otherwise get arbitrarily large
/// screen footprints.
pub(crate) fn clamped_ratios(t: &Vector3<f64>, cam: &CameraView) -> (f64, f64, [bool; 2]) {
    let gx = JACOBIAN_GUARD * 0.5 * cam.width as f64;
    let gy = JACOBIAN_GUARD * 0.5 * cam.height as f64;
    let (lo_x, hi_x) = (
        (-cam.cx - gx) / cam.fx,
        (cam.width as f64 - cam.cx + gx) / cam.fx,
    );
    let (lo_y, hi_y) = (
        (-cam.cy - gy) / cam.fy,
        (cam.height as f64 - cam.cy + gy) / cam.fy,
    );
    let (rx, ry) = (t.x / t.z, t.y / t.z);
    let cx = rx.clamp(lo_x, hi_x);
    let cy = ry.clamp(lo_y, hi_y);
    (cx, cy, [cx != rx, cy != ry])
}

pub(crate) fn project_with(
    t: Vector3<f64>,
    cov3d: Matrix3<f64>,
    w: &Matrix3<f64>,
    cam: &CameraView,
) -> Option<ProjectedGaussian> {
    if !(t.z > Z_NEAR) {
        return None;
    }
    let iz = 1.0 / t.z;
    let (rx, ry, _) = clamped_ratios(&t, cam);
    let jacobian = Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * rx * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * ry * iz,
    );
    let tm = jacobian * w;
    let cov2d = tm * cov3d * tm.transpose() + Matrix2::identity() * COV2D_DILATION;
    // Symmetrize so both renderers see identical off-diagonal terms.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    let cov2d = Matrix2::new(cov2d[(0, 0)], off, off, cov2d[(1, 1)]);
    Some(ProjectedGaussian {
        mean2d: [cam.fx * t.x * iz + cam.cx, cam.fy * t.y * iz + cam.cy],
        cov2d,
        depth: t.z,
        cam_point: t,
        jacobian,
        cov3d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose::RelativePose;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gaussian(mu: Vector3<f64>, scale: Vector3<f64>, rot: Quaternion) -> SemanticGaussian3D {
        SemanticGaussian3D {
            mu,
            rot,
            scale,
            opacity: 0.5,
            color: [0.5; 3],
            feat: vec![],
        }
    }

    fn camera(pose: RelativePose) -> CameraView {
        CameraView {
            fx: 40.0,
            fy: 40.0,
            cx: 32.0,
            cy: 32.0,
            pose,
            width: 64,
            height: 64,
        }
    }

    #[test]
    fn covariance_examples() {
        let c = covariance_from(&Vector3::new(1.0, 2.0, 3.0), &Quaternion::IDENTITY).unwrap();
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
        let rot = Quaternion::new(0.3, 0.4, -0.2, 0.8);
        let c = covariance_from(&Vector3::new(1.0, 1.0, 1.0), &rot).unwrap();
        assert!((c - Matrix3::identity()).abs().max() < 1e-12);
        assert!(covariance_from(&Vector3::new(1.0, 0.0, 1.0), &rot).is_err());
        assert!(covariance_from(&Vector3::new(1.0, -1.0, 1.0), &rot).is_err());
    }

    #[test]
    fn on_axis_isotropic_projection() {
        let (sigma, z) = (0.2, 3.0);
        let g = gaussian(
            Vector3::new(0.0, 0.0, z),
            Vector3::repeat(sigma),
            Quaternion::IDENTITY,
        );
        let cam = camera(RelativePose::IDENTITY);
        let p = project_gaussian(&g, &cam).unwrap().unwrap();
        assert_eq!(p.mean2d, [32.0, 32.0]);
        let expected = (40.0 * sigma / z).powi(2);
        assert_relative_eq!(p.cov2d[(0, 0)], expected + COV2D_DILATION, epsilon = 1e-12);
        assert_relative_eq!(p.cov2d[(1, 1)], expected + COV2D_DILATION, epsilon = 1e-12);
        assert_relative_eq!(p.cov2d[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn doubling_depth_halves_extent() {
        let cam = camera(RelativePose::IDENTITY);
        let scale = Vector3::new(0.1, 0.3, 0.2);
        let rot = Quaternion::new(0.9, 0.2, 0.1, -0.3);
        let near = project_gaussian(&gaussian(Vector3::new(0.0, 0.0, 2.0), scale, rot), &cam)
            .unwrap()
            .unwrap();
        let far = project_gaussian(&gaussian(Vector3::new(0.0, 0.0, 4.0), scale, rot), &cam)
            .unwrap()
            .unwrap();
        let ratio = far.cov2d_undilated().component_div(&near.cov2d_undilated());
        // Extent (std-dev) halves, so covariance quarters.
        for v in ratio.iter() {
            assert_relative_eq!(*v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let cam = camera(RelativePose::IDENTITY);
        let g = gaussian(
            Vector3::new(0.0, 0.0, 0.005),
            Vector3::repeat(0.1),
            Quaternion::IDENTITY,
        );
        assert!(project_gaussian(&g, &cam).unwrap().is_none());
        let g = gaussian(
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::repeat(0.1),
            Quaternion::IDENTITY,
        );
        assert!(project_gaussian(&g, &cam).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            s in prop::array::uniform3(0.05f64..3.0),
            q in prop::array::uniform4(-1.0f64..1.0),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-2);
            let scale = Vector3::from(s);
            let c = covariance_from(&scale, &Quaternion::from_array(q)).unwrap();
            prop_assert!((c - c.transpose()).abs().max() < 1e-12);
            let mut eig: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut expected: Vec<f64> = s.iter().map(|v| v * v).collect();
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                prop_assert!((a - b).abs() < 1e-9);
                prop_assert!(*a > 1e-12);
            }
        }

        #[test]
        fn rigid_translation_invariance(
            offset in prop::array::uniform3(-5.0f64..5.0),
            mu in prop::array::uniform3(-0.5f64..0.5),
        ) {
            let g = gaussian(
                Vector3::new(mu[0], mu[1], 3.0 + mu[2]),
                Vector3::new(0.1, 0.2, 0.3),
                Quaternion::new(0.8, 0.1, 0.3, -0.2),
            );
            let pose = RelativePose::new(Quaternion::new(0.95, 0.05, -0.1, 0.02), Vector3::zeros()).unwrap();
            let cam = camera(pose);
            let d = Vector3::from(offset);
            let moved_cam = cam.with_pose(RelativePose { translation: pose.translation + d, ..pose });
            let moved = SemanticGaussian3D { mu: g.mu + d, ..g.clone() };
            let a = project_gaussian(&g, &cam).unwrap().unwrap();
            let b = project_gaussian(&moved, &moved_cam).unwrap().unwrap();
            prop_assert!((a.mean2d[0] - b.mean2d[0]).abs() < 1e-9);
            prop_assert!((a.mean2d[1] - b.mean2d[1]).abs() < 1e-9);
            prop_assert!((a.cov2d - b.cov2d).abs().max() < 1e-9);
            prop_assert!((a.depth - b.depth).abs() < 1e-12);
        }

        #[test]
        fn roll_rotates_projection_about_principal_point(
            phi in -3.0f64..3.0,
            mu in prop::array::uniform3(-0.6f64..0.6),
        ) {
            let g = gaussian(
                Vector3::new(mu[0], mu[1], 3.0 + mu[2]),
                Vector3::new(0.1, 0.25, 0.15),
                Quaternion::new(0.7, 0.3, -0.1, 0.4),
            );
            let cam = camera(RelativePose::IDENTITY);
            let roll = Quaternion::from_axis_angle(Vector3::z(), phi);
            let rolled = cam.with_pose(RelativePose::new(roll, Vector3::zeros()).unwrap());
            let a = project_gaussian(&g, &cam).unwrap().unwrap();
            let b = project_gaussian(&g, &rolled).unwrap().unwrap();
            let (s, c) = (-phi).sin_cos();
            let rot = Matrix2::new(c, -s, s, c);
            let da = nalgebra::Vector2::new(a.mean2d[0] - cam.cx, a.mean2d[1] - cam.cy);
            let expected = rot * da;
            prop_assert!((b.mean2d[0] - cam.cx - expected.x).abs() < 1e-9);
            prop_assert!((b.mean2d[1] - cam.cy - expected.y).abs() < 1e-9);
            let conj = rot * a.cov2d_undilated() * rot.transpose();
            prop_assert!((conj - b.cov2d_undilated()).abs().max() < 1e-9);
        }
    }
}
