//! Differentiable semantic Gaussian splatting.
//!
//! A scene is a set of anisotropic 3D gaussians that carry color and an
//! N-dimensional semantic feature. The crate provides a tile-based
//! differentiable rasterizer, the training losses, a curriculum view sampler,
//! a small feed-forward two-view reconstruction model, a procedural dataset
//! generator and the evaluation metrics.

// Kernels index several parallel arrays per loop, and `!(x > 0.0)` is the
// intended way to reject NaN along with non-positive values.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod render;
pub mod sampler;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
pub use geometry::{CameraView, Quaternion, RelativePose, SemanticGaussian3D};
pub use image::ImageBuf;
pub use render::{GaussianScene, RenderOutput, RenderSettings};
