//! Quaternion and rigid-pose utilities, pinhole cameras, gaussian covariance
//! construction and EWA perspective projection.
//!
//! Everything here is a pure function of its inputs.

mod camera;
mod gaussian;
mod pose;
mod quaternion;

pub use camera::{look_at, CameraView};
pub use gaussian::{
    covariance_from, project_gaussian, ProjectedGaussian, SemanticGaussian3D, COV2D_DILATION,
    JACOBIAN_GUARD, Z_NEAR,
};
pub use pose::{rotation_angle_between, RelativePose};
pub use quaternion::Quaternion;

pub(crate) use gaussian::{clamped_ratios, project_with};
pub(crate) use quaternion::{
    canonicalize_backward, normalize_backward, rotation_matrix, rotation_matrix_partials,
};
