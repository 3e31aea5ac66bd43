//! Tile-based rasterization of semantic gaussians.
//!
//! The forward pass projects every gaussian, bins the screen footprints into
//! 16×16 tiles, and composites each pixel front to back. Color, semantic
//! feature and depth all share the same compositing weights
//! `w_i = α_i · G_i · T_i`. Work is split across tiles with rayon; every pixel
//! and every per-tile gradient buffer is reduced in a fixed order, so results
//! are bit-identical for any thread count.

mod backward;
mod bins;
mod forward;
mod reference;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project_gaussian, CameraView, SemanticGaussian3D};
use crate::image::ImageBuf;

pub use backward::render_backward;
pub use bins::{tile_bin, TileBins};
pub use forward::{render, render_with};
pub use reference::{render_reference, render_reference_with};

/// A collection of gaussians sharing one semantic feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub feature_dim: usize,
    pub gaussians: Vec<SemanticGaussian3D>,
}

impl GaussianScene {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            gaussians: Vec::new(),
        }
    }

    pub fn from_gaussians(feature_dim: usize, gaussians: Vec<SemanticGaussian3D>) -> Self {
        Self {
            feature_dim,
            gaussians,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.gaussians
            .iter()
            .enumerate()
            .try_for_each(|(i, g)| g.validate(i, self.feature_dim))
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub(crate) fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.feature_dim as f64);
        for g in &self.gaussians {
            g.mu.iter().for_each(|&v| eat(v));
            g.rot.to_array().iter().for_each(|&v| eat(v));
            g.scale.iter().for_each(|&v| eat(v));
            eat(g.opacity);
            g.color.iter().for_each(|&v| eat(v));
            g.feat.iter().for_each(|&v| eat(v));
        }
        h
    }
}

/// Rasterizer knobs. Defaults follow common splatting practice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Footprint half-extent in standard deviations; fragments outside the
    /// `k`-sigma ellipse are not evaluated.
    pub sigma_extent: f64,
    /// Fragments with `α·G` below this are skipped.
    pub min_alpha: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            sigma_extent: 3.0,
            min_alpha: 1.0 / 255.0,
            min_transmittance: 1e-4,
        }
    }
}

impl RenderSettings {
    /// Settings with every cutoff disabled, making the forward map smooth in
    /// all gaussian parameters (useful for finite-difference checks).
    pub fn smooth() -> Self {
        Self {
            sigma_extent: 1e3,
            min_alpha: 0.0,
            min_transmittance: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: ImageBuf,
    pub feature: ImageBuf,
    pub alpha: ImageBuf,
    /// Compositing-weighted mean of camera-space center depth; 0 where alpha is 0.
    pub depth: ImageBuf,
}

/// Gradients of a scalar loss with respect to each [`RenderOutput`] channel.
#[derive(Clone, Debug)]
pub struct RenderUpstream {
    pub rgb: ImageBuf,
    pub feature: ImageBuf,
    pub alpha: ImageBuf,
    pub depth: ImageBuf,
}

impl RenderUpstream {
    pub fn zeros(width: usize, height: usize, feature_dim: usize) -> Self {
        Self {
            rgb: ImageBuf::new(width, height, 3),
            feature: ImageBuf::new(width, height, feature_dim),
            alpha: ImageBuf::new(width, height, 1),
            depth: ImageBuf::new(width, height, 1),
        }
    }

    fn is_finite(&self) -> bool {
        self.rgb.is_finite()
            && self.feature.is_finite()
            && self.alpha.is_finite()
            && self.depth.is_finite()
    }
}

/// Per-gaussian gradients; layout mirrors [`SemanticGaussian3D`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub feature_dim: usize,
    pub mu: Vec<[f64; 3]>,
    pub rot: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Row-major `len × feature_dim`.
    pub feat: Vec<f64>,
}

impl RenderGradients {
    pub fn zeros(len: usize, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            mu: vec![[0.0; 3]; len],
            rot: vec![[0.0; 4]; len],
            scale: vec![[0.0; 3]; len],
            opacity: vec![0.0; len],
            color: vec![[0.0; 3]; len],
            feat: vec![0.0; len * feature_dim],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn feat_of(&self, i: usize) -> &[f64] {
        &self.feat[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn is_finite(&self) -> bool {
        let flat = self
            .mu
            .iter()
            .flatten()
            .chain(self.rot.iter().flatten())
            .chain(self.scale.iter().flatten())
            .chain(self.opacity.iter())
            .chain(self.color.iter().flatten())
            .chain(self.feat.iter());
        flat.into_iter().all(|v| v.is_finite())
    }
}

/// Inclusive pixel-index rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Screen-space gaussian ready for compositing.
#[derive(Clone, Debug)]
pub struct Splat {
    pub mean: [f64; 2],
    /// Inverse 2D covariance as (a, b, c) of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    /// Pixels whose centers lie in the bounding box of the k-sigma ellipse.
    pub rect: PixelRect,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub(crate) settings: RenderSettings,
    pub(crate) camera: CameraView,
    pub(crate) background: [f64; 3],
    pub(crate) fingerprint: u64,
    pub(crate) len: usize,
    pub(crate) feature_dim: usize,
    pub(crate) splats: Vec<Option<Splat>>,
    pub(crate) bins: TileBins,
}

impl ForwardState {
    pub fn splats(&self) -> &[Option<Splat>] {
        &self.splats
    }

    pub fn bins(&self) -> &TileBins {
        &self.bins
    }
}

pub(crate) fn check_inputs(
    scene: &GaussianScene,
    cam: &CameraView,
    background: &[f64; 3],
) -> Result<()> {
    cam.validate()?;
    if !background.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidCamera("non-finite background".into()));
    }
    scene.validate()
}

/// Project all gaussians into screen space. Culled or fully off-screen gaussians map to `None`.
pub fn project_scene(
    scene: &GaussianScene,
    cam: &CameraView,
    settings: &RenderSettings,
) -> Result<Vec<Option<Splat>>> {
    scene
        .gaussians
        .par_iter()
        .map(|g| {
            let Some(p) = project_gaussian(g, cam)? else {
                return Ok(None);
            };
            Ok(make_splat(
                p.mean2d, &p.cov2d, p.depth, g.opacity, cam, settings,
            ))
        })
        .collect()
}

pub(crate) fn conic_of(cov: &nalgebra::Matrix2<f64>) -> ([f64; 3], f64) {
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let det = a * c - b * b;
    ([c / det, -b / det, a / det], det)
}

fn make_splat(
    mean: [f64; 2],
    cov: &nalgebra::Matrix2<f64>,
    depth: f64,
    opacity: f64,
    cam: &CameraView,
    settings: &RenderSettings,
) -> Option<Splat> {
    let (conic, det) = conic_of(cov);
    if !(det > 0.0) {
        return None;
    }
    // The bounding box of {d : dᵀ Σ⁻¹ d ≤ k²} has half-extents k·sqrt(Σxx), k·sqrt(Σyy).
    // A small margin keeps boundary pixels from being lost to rounding.
    let k = settings.sigma_extent;
    let rx = k * cov[(0, 0)].sqrt() * (1.0 + 1e-9) + 1e-6;
    let ry = k * cov[(1, 1)].sqrt() * (1.0 + 1e-9) + 1e-6;
    let rect = pixel_range(mean[0], rx, cam.width).zip(pixel_range(mean[1], ry, cam.height));
    let ((x0, x1), (y0, y1)) = rect?;
    Some(Splat {
        mean,
        conic,
        depth,
        opacity,
        rect: PixelRect { x0, y0, x1, y1 },
    })
}

/// Indices of pixel centers (`i + 0.5`) inside `[center - r, center + r]`, clipped to `[0, n)`.
fn pixel_range(center: f64, r: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (center - r - 0.5).ceil();
    let hi = (center + r - 0.5).floor();
    if !(lo.is_finite() && hi.is_finite()) || hi < 0.0 || lo > (n as f64 - 1.0) || hi < lo {
        return None;
    }
    Some((lo.max(0.0) as usize, hi.min(n as f64 - 1.0) as usize))
}

/// One evaluated fragment: pixel offset from the splat mean, falloff, and alpha.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Fragment {
    pub dx: f64,
    pub dy: f64,
    pub falloff: f64,
    pub alpha: f64,
}

#[inline]
pub(crate) fn eval_fragment(
    s: &Splat,
    px: f64,
    py: f64,
    settings: &RenderSettings,
) -> Option<Fragment> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let [a, b, c] = s.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    let k = settings.sigma_extent;
    if q > k * k {
        return None;
    }
    let falloff = (-0.5 * q).exp();
    let alpha = s.opacity * falloff;
    if alpha < settings.min_alpha {
        return None;
    }
    Some(Fragment {
        dx,
        dy,
        falloff,
        alpha,
    })
}
