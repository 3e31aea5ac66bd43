use nalgebra::{Matrix3, Vector3};

use super::pose::RelativePose;
use crate::error::{Error, Result};

/// Pinhole camera: intrinsics in pixels plus a camera-to-world pose.
///
/// Camera frame convention: x right, y down, z forward. Pixel `(ix, iy)` has
/// its center at `(ix + 0.5, iy + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: RelativePose,
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    /// Camera with principal point at the image center and the given horizontal field of view.
    pub fn with_fov(width: usize, height: usize, fov_x: f64, pose: RelativePose) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            pose,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite())
            && self.pose.is_finite();
        if !finite {
            return Err(Error::InvalidCamera("non-finite parameter".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("empty image".into()));
        }
        if !(self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if !self.pose.rotation.is_unit() {
            return Err(Error::InvalidCamera("pose rotation is not unit".into()));
        }
        Ok(())
    }

    /// Rotation taking world-frame vectors into the camera frame.
    pub fn world_to_camera_rotation(&self) -> Matrix3<f64> {
        self.pose.rotation_matrix().transpose()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera_rotation() * (p - self.pose.translation)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }

    /// Copy of this camera with a different pose.
    pub fn with_pose(&self, pose: RelativePose) -> Self {
        Self { pose, ..*self }
    }
}

/// Camera-to-world pose looking from `eye` towards `target`, with image-down
/// aligned to `-up` as far as possible.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> RelativePose {
    let forward = (target - eye).normalize();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_columns(&[right, down, forward]);
    RelativePose::from_rotation_matrix(&r, eye)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rejects_bad_intrinsics() {
        let good = CameraView::with_fov(64, 48, 1.0, RelativePose::IDENTITY);
        assert!(good.validate().is_ok());
        assert!(CameraView { fx: 0.0, ..good }.validate().is_err());
        assert!(CameraView { cx: 64.0, ..good }.validate().is_err());
        assert!(CameraView { cy: -1.0, ..good }.validate().is_err());
    }

    #[test]
    fn look_at_points_forward_axis_at_target() {
        let eye = Vector3::new(2.0, 0.5, -1.0);
        let target = Vector3::new(0.0, 0.0, 0.0);
        let pose = look_at(eye, target, Vector3::new(0.0, 1.0, 0.0));
        let cam = CameraView::with_fov(32, 32, 1.0, pose);
        let p = cam.world_to_camera(&target);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        // World up should appear above the image center (negative camera y).
        let above = cam.world_to_camera(&Vector3::new(0.0, 1.0, 0.0));
        assert!(above.y < 0.0);
    }
}
