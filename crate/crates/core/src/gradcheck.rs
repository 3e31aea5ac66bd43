//! Finite-difference oracle for the rasterizer's analytic gradients.
//!
//! The loss under test is `Σ upstream ⊙ output` over all four render
//! channels, with random upstream weights. Each parameter is perturbed by
//! `±ε` and re-rendered with the forward pass only, so the oracle never
//! touches the backward code.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{CameraView, Quaternion, RelativePose, SemanticGaussian3D};
use crate::image::ImageBuf;
use crate::render::{
    project_scene, render_backward, render_with, GaussianScene, RenderOutput, RenderSettings,
    RenderUpstream,
};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub rel_tolerance: f64,
    /// Elements where both gradients are below this magnitude are not compared.
    pub magnitude_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            rel_tolerance: 1e-3,
            magnitude_floor: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Position,
    Rotation,
    Scale,
    Opacity,
    Color,
    Feature,
}

impl ParamClass {
    pub const ALL: [ParamClass; 6] = [
        ParamClass::Position,
        ParamClass::Rotation,
        ParamClass::Scale,
        ParamClass::Opacity,
        ParamClass::Color,
        ParamClass::Feature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Position => "position",
            ParamClass::Rotation => "rotation",
            ParamClass::Scale => "scale",
            ParamClass::Opacity => "opacity",
            ParamClass::Color => "color",
            ParamClass::Feature => "feature",
        }
    }

    fn width(self, feature_dim: usize) -> usize {
        match self {
            ParamClass::Position | ParamClass::Scale | ParamClass::Color => 3,
            ParamClass::Rotation => 4,
            ParamClass::Opacity => 1,
            ParamClass::Feature => feature_dim,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ClassReport {
    pub compared: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub classes: Vec<(ParamClass, ClassReport)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.classes.iter().all(|(_, r)| r.failures == 0)
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        for (class, r) in &other.classes {
            let entry = &mut self.classes.iter_mut().find(|(c, _)| c == class).unwrap().1;
            entry.compared += r.compared;
            entry.failures += r.failures;
            entry.max_rel_error = entry.max_rel_error.max(r.max_rel_error);
        }
    }

    pub fn empty() -> Self {
        Self {
            classes: ParamClass::ALL
                .iter()
                .map(|&c| (c, ClassReport::default()))
                .collect(),
        }
    }
}

/// How random test scenes are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneRegime {
    /// Arbitrary positions (including behind the camera), sizes and opacities.
    General,
    /// Wide gaussians whose k-sigma ellipse and 1/255 alpha contour both lie
    /// outside the image, so no cutoff is active anywhere: the forward map is
    /// smooth and central differences are a valid oracle under default settings.
    Smooth,
}

pub fn test_camera(size: usize) -> CameraView {
    CameraView::with_fov(size, size, 1.0, RelativePose::IDENTITY)
}

fn random_unit_quaternion(rng: &mut ChaCha8Rng) -> Quaternion {
    loop {
        let q = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if q.norm() > 0.2 {
            return q.canonicalize().unwrap();
        }
    }
}

fn random_gaussian(
    rng: &mut ChaCha8Rng,
    regime: SceneRegime,
    feature_dim: usize,
) -> SemanticGaussian3D {
    let feat = (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let color = [rng.gen(), rng.gen(), rng.gen()];
    match regime {
        SceneRegime::General => {
            let z: f64 = rng.gen_range(-0.5..6.0);
            SemanticGaussian3D {
                mu: Vector3::new(
                    rng.gen_range(-1.5..1.5) * z.abs().max(0.3),
                    rng.gen_range(-1.5..1.5) * z.abs().max(0.3),
                    z,
                ),
                rot: random_unit_quaternion(rng),
                scale: Vector3::new(
                    rng.gen_range(0.01..0.6),
                    rng.gen_range(0.01..0.6),
                    rng.gen_range(0.01..0.6),
                ),
                opacity: rng.gen_range(0.02..0.99),
                color,
                feat,
            }
        }
        SceneRegime::Smooth => {
            let z = rng.gen_range(2.5..4.0);
            SemanticGaussian3D {
                mu: Vector3::new(
                    rng.gen_range(-0.25..0.25) * z,
                    rng.gen_range(-0.25..0.25) * z,
                    z,
                ),
                rot: random_unit_quaternion(rng),
                scale: Vector3::new(
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(0.3..3.0),
                ),
                opacity: rng.gen_range(0.05..0.6),
                color,
                feat,
            }
        }
    }
}

/// True when no rasterizer cutoff can switch for any pixel of `cam` within a
/// relative margin.
fn cutoffs_inactive(g: &SemanticGaussian3D, cam: &CameraView, settings: &RenderSettings) -> bool {
    let scene = GaussianScene::from_gaussians(g.feat.len(), vec![g.clone()]);
    let Ok(splats) = project_scene(&scene, cam, settings) else {
        return false;
    };
    let Some(s) = &splats[0] else {
        return false;
    };
    let [a, b, c] = s.conic;
    // q is convex, so its maximum over the image rectangle sits at a corner.
    let corners = [
        (0.5, 0.5),
        (cam.width as f64 - 0.5, 0.5),
        (0.5, cam.height as f64 - 0.5),
        (cam.width as f64 - 0.5, cam.height as f64 - 0.5),
    ];
    let q_max = corners
        .iter()
        .map(|&(x, y)| {
            let (dx, dy) = (x - s.mean[0], y - s.mean[1]);
            a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        })
        .fold(0.0, f64::max);
    let k2 = settings.sigma_extent * settings.sigma_extent;
    let alpha_min = g.opacity * (-0.5 * q_max).exp();
    q_max < 0.8 * k2 && alpha_min > 1.5 * settings.min_alpha
}

/// Seeded random scene of `count` gaussians for `cam`.
pub fn random_scene(
    seed: u64,
    count: usize,
    feature_dim: usize,
    cam: &CameraView,
    regime: SceneRegime,
) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = RenderSettings::default();
    let gaussians = (0..count)
        .map(|_| loop {
            let g = random_gaussian(&mut rng, regime, feature_dim);
            if regime == SceneRegime::General || cutoffs_inactive(&g, cam, &settings) {
                break g;
            }
        })
        .collect();
    GaussianScene::from_gaussians(feature_dim, gaussians)
}

pub fn random_upstream(
    seed: u64,
    width: usize,
    height: usize,
    feature_dim: usize,
) -> RenderUpstream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |c: usize| {
        let data = (0..width * height * c)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        ImageBuf::from_vec(width, height, c, data).unwrap()
    };
    RenderUpstream {
        rgb: fill(3),
        feature: fill(feature_dim),
        alpha: fill(1),
        depth: fill(1),
    }
}

/// `Σ upstream ⊙ output`, summed in a fixed order.
pub fn weighted_loss(out: &RenderOutput, up: &RenderUpstream) -> f64 {
    let dot =
        |a: &ImageBuf, b: &ImageBuf| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
    dot(&out.rgb, &up.rgb)
        + dot(&out.feature, &up.feature)
        + dot(&out.alpha, &up.alpha)
        + dot(&out.depth, &up.depth)
}

fn param_mut(g: &mut SemanticGaussian3D, class: ParamClass, k: usize) -> &mut f64 {
    match class {
        ParamClass::Position => &mut g.mu[k],
        ParamClass::Rotation => match k {
            0 => &mut g.rot.w,
            1 => &mut g.rot.x,
            2 => &mut g.rot.y,
            _ => &mut g.rot.z,
        },
        ParamClass::Scale => &mut g.scale[k],
        ParamClass::Opacity => &mut g.opacity,
        ParamClass::Color => &mut g.color[k],
        ParamClass::Feature => &mut g.feat[k],
    }
}

fn analytic(grads: &crate::render::RenderGradients, class: ParamClass, i: usize, k: usize) -> f64 {
    match class {
        ParamClass::Position => grads.mu[i][k],
        ParamClass::Rotation => grads.rot[i][k],
        ParamClass::Scale => grads.scale[i][k],
        ParamClass::Opacity => grads.opacity[i],
        ParamClass::Color => grads.color[i][k],
        ParamClass::Feature => grads.feat_of(i)[k],
    }
}

/// Compare analytic gradients with central differences for every parameter of every gaussian.
pub fn check_render_gradients(
    settings: &RenderSettings,
    scene: &GaussianScene,
    cam: &CameraView,
    background: [f64; 3],
    upstream: &RenderUpstream,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, state) = render_with(settings, scene, cam, background)?;
    let grads = render_backward(&state, scene, cam, upstream)?;
    let mut report = GradCheckReport::empty();
    let mut probe = scene.clone();
    for i in 0..scene.len() {
        for (class, entry) in report.classes.iter_mut() {
            for k in 0..class.width(scene.feature_dim) {
                let original = *param_mut(&mut probe.gaussians[i], *class, k);
                *param_mut(&mut probe.gaussians[i], *class, k) = original + cfg.epsilon;
                let plus =
                    weighted_loss(&render_with(settings, &probe, cam, background)?.0, upstream);
                *param_mut(&mut probe.gaussians[i], *class, k) = original - cfg.epsilon;
                let minus =
                    weighted_loss(&render_with(settings, &probe, cam, background)?.0, upstream);
                *param_mut(&mut probe.gaussians[i], *class, k) = original;

                let fd = (plus - minus) / (2.0 * cfg.epsilon);
                let an = analytic(&grads, *class, i, k);
                let scale = an.abs().max(fd.abs());
                if scale <= cfg.magnitude_floor {
                    continue;
                }
                let rel = (an - fd).abs() / scale;
                entry.compared += 1;
                entry.max_rel_error = entry.max_rel_error.max(rel);
                if !(rel < cfg.rel_tolerance) {
                    entry.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

/// The seeded renderer gradient suite: `scenes` smooth-regime scenes of
/// `count` gaussians rendered at `size`×`size` with default settings.
pub fn render_gradient_suite(
    seed: u64,
    scenes: usize,
    count: usize,
    size: usize,
    feature_dim: usize,
) -> Result<GradCheckReport> {
    let cam = test_camera(size);
    let cfg = GradCheckConfig::default();
    let mut report = GradCheckReport::empty();
    for s in 0..scenes as u64 {
        let scene = random_scene(
            seed.wrapping_add(s),
            count,
            feature_dim,
            &cam,
            SceneRegime::Smooth,
        );
        let upstream = random_upstream(seed.wrapping_add(1000 + s), size, size, feature_dim);
        let r = check_render_gradients(
            &RenderSettings::default(),
            &scene,
            &cam,
            [0.2, 0.3, 0.4],
            &upstream,
            &cfg,
        )?;
        report.merge(&r);
    }
    Ok(report)
}
