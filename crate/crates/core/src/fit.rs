//! Per-scene optimization of a free gaussian set against posed views.
//!
//! This is the renderer's end-to-end check: gaussians are seeded by
//! back-projecting sampled pixels through the ground-truth depth maps, then
//! refined with Adam on an rgb plus semantic-feature reconstruction loss.

use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Quaternion, SemanticGaussian3D};
use crate::image::ImageBuf;
use crate::metrics::psnr;
use crate::nn::{sigmoid, Adam, AdamConfig, Mat, ParamStore, P};
use crate::render::{
    render, render_backward, render_with, GaussianScene, RenderSettings, RenderUpstream,
};
use crate::synth::{DatasetSequence, Frame};

const OPACITY_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub gaussians: usize,
    pub steps: usize,
    pub seed: u64,
    /// Weight of the feature-map MSE next to the rgb MSE.
    pub feature_weight: f64,
    /// Initial footprint radius in pixels of the seeding view.
    pub init_radius_px: f64,
    pub init_opacity: f64,
    pub lr_position: f64,
    /// Position rate at the last step; decays geometrically from `lr_position`.
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_feature: f64,
    /// Loss is logged every this many steps.
    pub log_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            gaussians: 512,
            steps: 2000,
            seed: 0,
            feature_weight: 0.1,
            init_radius_px: 3.0,
            init_opacity: 0.8,
            lr_position: 2e-3,
            lr_position_final: 2e-5,
            lr_rotation: 5e-3,
            lr_scale: 1e-2,
            lr_opacity: 5e-2,
            lr_color: 2e-2,
            lr_feature: 2e-2,
            log_every: 50,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.gaussians == 0 {
            bad.push("fit.gaussians must be positive".to_string());
        }
        if self.log_every == 0 {
            bad.push("fit.log_every must be positive".into());
        }
        if !(self.feature_weight >= 0.0 && self.feature_weight.is_finite()) {
            bad.push("fit.feature_weight must be finite and >= 0".into());
        }
        if !(self.init_radius_px > 0.0 && self.init_radius_px.is_finite()) {
            bad.push("fit.init_radius_px must be positive".into());
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            bad.push("fit.init_opacity must lie in (0, 1)".into());
        }
        for (k, v) in [
            ("fit.lr_position", self.lr_position),
            ("fit.lr_position_final", self.lr_position_final),
            ("fit.lr_rotation", self.lr_rotation),
            ("fit.lr_scale", self.lr_scale),
            ("fit.lr_opacity", self.lr_opacity),
            ("fit.lr_color", self.lr_color),
            ("fit.lr_feature", self.lr_feature),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(format!("{k} = {v} must be finite and >= 0"));
            }
        }
        if self.lr_position_final > 0.0 && self.lr_position == 0.0 {
            bad.push("fit.lr_position_final needs a positive fit.lr_position".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub scene: GaussianScene,
    /// (step, loss) every `log_every` steps and at the end.
    pub losses: Vec<(usize, f64)>,
    pub train_psnr: f64,
    /// Per held-out frame, in the order given.
    pub heldout_psnr: Vec<f64>,
    pub duration: Duration,
}

/// Unconstrained parameters of a free gaussian set.
struct Free {
    store: ParamStore,
    mu: P,
    rot: P,
    log_scale: P,
    opacity: P,
    color: P,
    feat: P,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Free {
    fn scene(&self, feature_dim: usize) -> GaussianScene {
        let s = &self.store;
        let (mu, rot, ls, op, col, feat) = (
            s.get(self.mu),
            s.get(self.rot),
            s.get(self.log_scale),
            s.get(self.opacity),
            s.get(self.color),
            s.get(self.feat),
        );
        let gaussians = (0..mu.nrows())
            .map(|i| SemanticGaussian3D {
                mu: Vector3::new(mu[(i, 0)], mu[(i, 1)], mu[(i, 2)]),
                rot: Quaternion::new(rot[(i, 0)], rot[(i, 1)], rot[(i, 2)], rot[(i, 3)]),
                scale: Vector3::new(ls[(i, 0)].exp(), ls[(i, 1)].exp(), ls[(i, 2)].exp()),
                opacity: OPACITY_EPS + (1.0 - 2.0 * OPACITY_EPS) * sigmoid(op[(i, 0)]),
                color: [
                    sigmoid(col[(i, 0)]),
                    sigmoid(col[(i, 1)]),
                    sigmoid(col[(i, 2)]),
                ],
                feat: feat.row(i).iter().copied().collect(),
            })
            .collect();
        GaussianScene::from_gaussians(feature_dim, gaussians)
    }
}

/// Seed `count` gaussians by back-projecting stratified pixel samples of the
/// given frames through their depth maps.
pub fn init_from_depth(
    frames: &[&Frame],
    count: usize,
    cfg: &FitConfig,
    feature_dim: usize,
) -> Result<GaussianScene> {
    if frames.is_empty() {
        return Err(Error::config("fitting needs at least one view"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gaussians = Vec::with_capacity(count);
    for k in 0..count {
        let f = frames[k % frames.len()];
        let (w, h) = (f.rgb.width, f.rgb.height);
        // Stratify within each view: the j-th sample of a view lands in the
        // j-th cell of a grid sized for that view's share.
        let share = count.div_ceil(frames.len());
        let j = k / frames.len();
        let cells = (share as f64).sqrt().ceil() as usize;
        let (cx, cy) = (j % cells, j / cells);
        let (cw, ch) = (w as f64 / cells as f64, h as f64 / cells as f64);
        let x = ((cx as f64 + rng.gen::<f64>()) * cw).min(w as f64 - 1e-9) as usize;
        let y = ((cy as f64 + rng.gen::<f64>()) * ch).min(h as f64 - 1e-9) as usize;
        let d = f.depth.get(x, y, 0);
        if !(d > 0.0 && d.is_finite()) {
            // Uncovered pixel; the slot is refilled below.
            continue;
        }
        let cam = &f.camera;
        let local = Vector3::new(
            (x as f64 + 0.5 - cam.cx) / cam.fx * d,
            (y as f64 + 0.5 - cam.cy) / cam.fy * d,
            d,
        );
        let radius = cfg.init_radius_px * d / cam.fx;
        let c = f.rgb.pixel(x, y);
        gaussians.push(SemanticGaussian3D {
            mu: cam.pose.transform_point(&local),
            rot: Quaternion::IDENTITY,
            scale: Vector3::repeat(radius),
            opacity: cfg.init_opacity,
            color: [c[0], c[1], c[2]],
            feat: f.feature.pixel(x, y).to_vec(),
        });
    }
    if gaussians.is_empty() {
        return Err(Error::Numeric(
            "no pixel with valid depth to seed from".into(),
        ));
    }
    // Refill skipped slots by duplicating seeds so the count is exact.
    let mut i = 0;
    while gaussians.len() < count {
        let g = gaussians[i].clone();
        gaussians.push(g);
        i += 1;
    }
    let scene = GaussianScene::from_gaussians(feature_dim, gaussians);
    scene.validate()?;
    Ok(scene)
}

fn free_from(scene: &GaussianScene) -> Free {
    let n = scene.len();
    let fdim = scene.feature_dim;
    let g = &scene.gaussians;
    let mut store = ParamStore::new();
    let mu = store.add("mu", Mat::from_fn(n, 3, |i, k| g[i].mu[k]));
    let rot = store.add("rot", Mat::from_fn(n, 4, |i, k| g[i].rot.to_array()[k]));
    let log_scale = store.add("log_scale", Mat::from_fn(n, 3, |i, k| g[i].scale[k].ln()));
    let opacity = store.add(
        "opacity",
        Mat::from_fn(n, 1, |i, _| {
            logit(
                ((g[i].opacity - OPACITY_EPS) / (1.0 - 2.0 * OPACITY_EPS)).clamp(1e-4, 1.0 - 1e-4),
            )
        }),
    );
    let color = store.add(
        "color",
        Mat::from_fn(n, 3, |i, k| logit(g[i].color[k].clamp(0.01, 0.99))),
    );
    let feat = store.add("feat", Mat::from_fn(n, fdim, |i, k| g[i].feat[k]));
    Free {
        store,
        mu,
        rot,
        log_scale,
        opacity,
        color,
        feat,
    }
}

fn mse_upstream(gt: &ImageBuf, pred: &ImageBuf, weight: f64) -> (f64, ImageBuf) {
    let n = gt.data.len() as f64;
    let mut grad = ImageBuf::new(gt.width, gt.height, gt.channels);
    let mut sum = 0.0;
    for ((g, &a), &b) in grad.data.iter_mut().zip(&pred.data).zip(&gt.data) {
        let d = a - b;
        sum += d * d;
        *g = weight * 2.0 * d / n;
    }
    (weight * sum / n, grad)
}

/// Fit `cfg.gaussians` gaussians to the `train` frames of `data` and report
/// PSNR on the `heldout` frames.
pub fn fit_scene(
    data: &DatasetSequence,
    train: &[usize],
    heldout: &[usize],
    cfg: &FitConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    let start = Instant::now();
    for &i in train.iter().chain(heldout) {
        if i >= data.frames.len() {
            return Err(Error::config(format!(
                "frame {i} out of range ({} frames)",
                data.frames.len()
            )));
        }
    }
    let views: Vec<&Frame> = train.iter().map(|&i| &data.frames[i]).collect();
    let feature_dim = data.scene.scene.feature_dim;
    let init = init_from_depth(&views, cfg.gaussians, cfg, feature_dim)?;
    let mut free = free_from(&init);
    let mut adam = Adam::new(AdamConfig::default(), &free.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6669_7400);
    let settings = RenderSettings::default();
    let mut losses = Vec::new();
    let decay = if cfg.lr_position > 0.0 && cfg.lr_position_final > 0.0 {
        (cfg.lr_position_final / cfg.lr_position).ln()
    } else {
        0.0
    };
    let mut running = 0.0;
    let mut counted = 0usize;
    for step in 0..cfg.steps {
        let f = views[rng.gen_range(0..views.len())];
        let scene = free.scene(feature_dim);
        let (out, state) = render_with(&settings, &scene, &f.camera, [0.0; 3])?;
        let (l_rgb, g_rgb) = mse_upstream(&f.rgb, &out.rgb, 1.0);
        let (l_feat, g_feat) = mse_upstream(&f.feature, &out.feature, cfg.feature_weight);
        let loss = l_rgb + l_feat;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "fit loss became {loss} at step {step}"
            )));
        }
        running += loss;
        counted += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            losses.push((step + 1, running / counted as f64));
            log::debug!(
                "fit step {}: loss {:.6}",
                step + 1,
                running / counted as f64
            );
            running = 0.0;
            counted = 0;
        }
        let mut up = RenderUpstream::zeros(f.camera.width, f.camera.height, feature_dim);
        up.rgb = g_rgb;
        up.feature = g_feat;
        let g = render_backward(&state, &scene, &f.camera, &up)?;

        let mut grads = free.store.zeros_like();
        {
            let s = &free.store;
            let (ls, op, col) = (
                s.get(free.log_scale),
                s.get(free.opacity),
                s.get(free.color),
            );
            for i in 0..scene.len() {
                for k in 0..3 {
                    grads.get_mut(free.mu)[(i, k)] = g.mu[i][k];
                    grads.get_mut(free.log_scale)[(i, k)] = g.scale[i][k] * ls[(i, k)].exp();
                    let c = sigmoid(col[(i, k)]);
                    grads.get_mut(free.color)[(i, k)] = g.color[i][k] * c * (1.0 - c);
                }
                for k in 0..4 {
                    grads.get_mut(free.rot)[(i, k)] = g.rot[i][k];
                }
                let o = sigmoid(op[(i, 0)]);
                grads.get_mut(free.opacity)[(i, 0)] =
                    g.opacity[i] * (1.0 - 2.0 * OPACITY_EPS) * o * (1.0 - o);
                for (k, v) in g.feat_of(i).iter().enumerate() {
                    grads.get_mut(free.feat)[(i, k)] = *v;
                }
            }
        }
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let lr_mu = cfg.lr_position * (decay * progress).exp();
        let mut rates = vec![0.0; free.store.len()];
        for (p, r) in [
            (free.mu, lr_mu),
            (free.rot, cfg.lr_rotation),
            (free.log_scale, cfg.lr_scale),
            (free.opacity, cfg.lr_opacity),
            (free.color, cfg.lr_color),
            (free.feat, cfg.lr_feature),
        ] {
            rates[p.0] = r;
        }
        adam.update_with_rates(&mut free.store, &grads, &rates);
        // Keep raw quaternions away from zero norm; direction is all that matters.
        let rot = free.store.get_mut(free.rot);
        for i in 0..rot.nrows() {
            let n = rot.row(i).norm();
            if !(1e-3..=1e3).contains(&n) {
                let r = rot.row(i) / n.max(1e-300);
                rot.row_mut(i).copy_from(&r);
            }
        }
    }
    let scene = free.scene(feature_dim);
    scene.validate()?;
    let eval = |idx: &[usize]| -> Result<Vec<f64>> {
        idx.iter()
            .map(|&i| {
                let f = &data.frames[i];
                psnr(&f.rgb, &render(&scene, &f.camera, [0.0; 3])?.rgb)
            })
            .collect()
    };
    let train_psnr = eval(train)?;
    let heldout_psnr = eval(heldout)?;
    Ok(FitReport {
        train_psnr: train_psnr.iter().sum::<f64>() / train_psnr.len() as f64,
        heldout_psnr,
        losses,
        scene,
        duration: start.elapsed(),
    })
}
