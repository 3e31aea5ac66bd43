//! Two-view feed-forward reconstruction model.
//!
//! Both images are cut into patches and encoded with shared weights plus a
//! per-view embedding. One gated mixing block lets every token see the other
//! view's mean token. Decoders upsample tokens back to pixels: a geometry
//! decoder per view and one attribute decoder shared by both views. The
//! geometry heads place one gaussian per pixel in the first view's camera
//! frame and regress the second camera's pose; the attribute heads produce
//! the remaining gaussian parameters, with shortcuts from the input image and
//! its semantic map.

use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    canonicalize_backward, CameraView, Quaternion, RelativePose, SemanticGaussian3D,
};
use crate::image::ImageBuf;
use crate::nn::{
    add_row, col_mean, col_sum, random_mat, relu, relu_backward, sigmoid, Adam, Linear, Mat,
    ParamStore, P,
};
use crate::objectives::{
    photometric_loss_with_grad, pose_loss_with_grad, semantic_loss_with_grad, LossBreakdown,
    LossWeights, PhotometricDistance,
};
use crate::render::{
    render_backward, render_with, GaussianScene, RenderGradients, RenderSettings, RenderUpstream,
};
use crate::sampler::normalize_pair_scale;
use crate::synth::SemanticTeacher;

/// Attribute head outputs per pixel: rotation 4, scale 3, opacity 1, color 3.
const ATTR: usize = 11;
/// Keeps opacity strictly inside (0, 1) without clamping.
const OPACITY_EPS: f64 = 1e-6;
/// Horizontal row bands of the pose cost volume.
const POSE_BANDS: usize = 4;
/// Channels of the per-pixel matching descriptor.
const DESCRIPTOR_DIM: usize = 8;
/// Floor inside the log of the pose cost volume.
const COST_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    /// Token width.
    pub dim: usize,
    pub blocks: usize,
    pub decoder_dim: usize,
    pub head_hidden: usize,
    /// Semantic feature dimension N.
    pub feature_dim: usize,
    /// Depth of the plane the localization heads start from.
    pub init_depth: f64,
    /// Field of view used only to lay out that initial plane.
    pub nominal_fov_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub semantic_head: bool,
    pub image_shortcut: bool,
    pub semantic_shortcut: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            patch: 4,
            dim: 32,
            blocks: 3,
            decoder_dim: 32,
            head_hidden: 32,
            feature_dim: 8,
            init_depth: 2.0,
            nominal_fov_deg: 60.0,
            scale_min: 1e-4,
            scale_max: 1.0,
            semantic_head: true,
            image_shortcut: true,
            semantic_shortcut: true,
        }
    }
}

impl ModelConfig {
    /// Largest horizontal offset, in pixels, the pose cost volume compares.
    pub fn max_shift(&self) -> usize {
        self.width / 2
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.height < POSE_BANDS {
            bad.push(format!("model.height must be at least {POSE_BANDS}"));
        }
        if self.patch == 0 || self.width == 0 || self.height == 0 {
            bad.push("model.width, model.height and model.patch must be positive".to_string());
        } else if !self.width.is_multiple_of(self.patch) || !self.height.is_multiple_of(self.patch)
        {
            bad.push(format!(
                "image size {}x{} is not divisible by model.patch = {}",
                self.width, self.height, self.patch
            ));
        }
        for (k, v) in [
            ("model.dim", self.dim),
            ("model.decoder_dim", self.decoder_dim),
            ("model.head_hidden", self.head_hidden),
            ("model.feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                bad.push(format!("{k} must be positive"));
            }
        }
        if !(self.init_depth > 0.0 && self.init_depth.is_finite()) {
            bad.push("model.init_depth must be positive".into());
        }
        if !(self.nominal_fov_deg > 0.0 && self.nominal_fov_deg < 180.0) {
            bad.push("model.nominal_fov_deg must lie in (0, 180)".into());
        }
        if !(self.scale_min > 0.0 && self.scale_min < self.scale_max && self.scale_max.is_finite())
        {
            bad.push("model scale range must satisfy 0 < scale_min < scale_max".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn tokens(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Per-view token features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major `height × width × channels`.
    pub data: Vec<f64>,
}

impl FeatureTensor {
    fn from_mat(m: &Mat, width: usize, height: usize) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self {
            height,
            width,
            channels: m.ncols(),
            data,
        }
    }
}

/// Gaussians of both views in the first view's camera frame, plus the
/// predicted pose of the second camera in that frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedScene {
    /// First all pixels of view 0 in row-major order, then view 1.
    pub scene: GaussianScene,
    pub pose: RelativePose,
}

/// Raw per-pixel geometry of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryOutput {
    /// `h·w` centers in the first view's frame.
    pub positions: Vec<Vector3<f64>>,
    /// Present for view 1 only.
    pub pose: Option<RelativePose>,
}

/// Per-pixel gaussian attributes of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeOutput {
    pub rot: Vec<Quaternion>,
    pub scale: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// `h·w × N`, row-major.
    pub feat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    up: Linear,
    sub: P,
    out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderCache {
    pre1: Mat,
    a: Mat,
    pre2: Mat,
    out: Mat,
}

#[derive(Clone, Debug, PartialEq)]
struct SemanticHead {
    image: Option<P>,
    semantic: Option<P>,
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    patch: Linear,
    pos: P,
    view: P,
    blocks: Vec<(Linear, Linear)>,
    gate_x: Linear,
    gate_m: P,
    mix: Linear,
    geo: [Decoder; 2],
    loc_w: [P; 2],
    loc_bias: [P; 2],
    descriptor: Linear,
    pose_hidden: Linear,
    pose_out: Linear,
    attr: Decoder,
    app_image: Option<P>,
    app_hidden: Linear,
    app_out: Linear,
    sem: Option<SemanticHead>,
}

/// Token index and sub-patch index of every pixel.
#[derive(Clone, Debug, PartialEq)]
struct Grid {
    token: Vec<usize>,
    sub: Vec<usize>,
}

impl Grid {
    fn new(c: &ModelConfig) -> Self {
        let tw = c.width / c.patch;
        let mut token = Vec::with_capacity(c.pixels());
        let mut sub = Vec::with_capacity(c.pixels());
        for y in 0..c.height {
            for x in 0..c.width {
                token.push((y / c.patch) * tw + x / c.patch);
                sub.push((y % c.patch) * c.patch + x % c.patch);
            }
        }
        Self { token, sub }
    }
}

#[derive(Clone, Debug)]
struct ViewCache {
    patches: Mat,
    stream: Vec<Mat>,
    block_pre: Vec<Mat>,
    block_h: Vec<Mat>,
    gate: Mat,
    feat: Mat,
    geo: DecoderCache,
    attr: DecoderCache,
    image: Mat,
    semantic: Mat,
    app_in: Mat,
    app_pre: Mat,
    app_h: Mat,
    app_raw: Mat,
    sem_pre: Option<Mat>,
    sem_h: Option<Mat>,
    feat_out: Mat,
    positions: Mat,
}

#[derive(Clone, Debug)]
struct Cache {
    views: Vec<ViewCache>,
    /// Mean token of each view before mixing.
    means: [Mat; 2],
    /// Mixing update received by each view.
    updates: [Mat; 2],
    /// 3×3 rgb neighbourhoods, per view.
    neigh: [Mat; 2],
    /// Matching descriptors and the cost volume built from them.
    desc: [Mat; 2],
    cost: Vec<f64>,
    pose_pooled: Mat,
    pose_pre: Mat,
    pose_h: Mat,
    pose_raw: [f64; 7],
}

/// Everything one training step needs, already in the first context
/// camera's frame and scaled to a unit context baseline.
#[derive(Clone, Copy, Debug)]
pub struct TrainingTriple<'a> {
    pub context_rgb: [&'a ImageBuf; 2],
    /// Semantic maps fed to the shortcut (image-derived).
    pub context_sem: [&'a ImageBuf; 2],
    pub target_rgb: &'a ImageBuf,
    /// Semantic map the rendered features are distilled towards.
    pub target_sem: &'a ImageBuf,
    pub target_camera: CameraView,
    /// Second context camera relative to the first.
    pub context_pose: RelativePose,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// False when the step was rejected for a non-finite loss or gradient.
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Image-only semantic model used at inference for the shortcut input.
    pub teacher: Option<SemanticTeacher>,
    layers: Layers,
    grid: Grid,
}

/// Each pixel's 3×3 rgb neighbourhood with edge replication, row-major over
/// (dy, dx, channel).
fn neighbourhoods(img: &ImageBuf) -> Mat {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut out = Mat::zeros(img.pixels(), 27);
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) as usize;
            let mut k = 0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let px = img.pixel(
                        (x + dx).clamp(0, w - 1) as usize,
                        (y + dy).clamp(0, h - 1) as usize,
                    );
                    for c in 0..3 {
                        out[(p, k)] = px[c];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Log mean squared descriptor difference between view 1 and view 0 shifted
/// horizontally by `s` pixels, for `s` in `-max_shift..=max_shift`, per row
/// band, laid out band-major. The log keeps small residuals on a usable
/// scale for the head.
fn cost_volume(d0: &Mat, d1: &Mat, width: usize, max_shift: usize) -> Vec<f64> {
    let height = d0.nrows() / width;
    let span = 2 * max_shift + 1;
    let mut sum = vec![0.0; POSE_BANDS * span];
    let mut count = vec![0usize; POSE_BANDS * span];
    for y in 0..height {
        let band = y * POSE_BANDS / height;
        for (k, s) in (-(max_shift as i64)..=max_shift as i64).enumerate() {
            let i = band * span + k;
            for x in 0..width as i64 {
                let xs = x + s;
                if xs < 0 || xs >= width as i64 {
                    continue;
                }
                let (a, b) = (
                    d0.row(y * width + xs as usize),
                    d1.row(y * width + x as usize),
                );
                sum[i] += (a - b).norm_squared();
                count[i] += 1;
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &n)| (COST_EPS + s / n.max(1) as f64).ln())
        .collect()
}

fn cost_volume_backward(
    d: &[Mat; 2],
    cost: &[f64],
    dcost: &[f64],
    width: usize,
    max_shift: usize,
) -> [Mat; 2] {
    let height = d[0].nrows() / width;
    let span = 2 * max_shift + 1;
    let mut count = vec![0usize; POSE_BANDS * span];
    for y in 0..height {
        let band = y * POSE_BANDS / height;
        for (k, s) in (-(max_shift as i64)..=max_shift as i64).enumerate() {
            count[band * span + k] += width - s.unsigned_abs() as usize;
        }
    }
    let mut g = [
        Mat::zeros(d[0].nrows(), d[0].ncols()),
        Mat::zeros(d[1].nrows(), d[1].ncols()),
    ];
    for y in 0..height {
        let band = y * POSE_BANDS / height;
        for (k, s) in (-(max_shift as i64)..=max_shift as i64).enumerate() {
            let i = band * span + k;
            // d ln(ε + m) / dm = exp(-cost).
            let w = 2.0 * dcost[i] * (-cost[i]).exp() / count[i].max(1) as f64;
            for x in 0..width as i64 {
                let xs = x + s;
                if xs < 0 || xs >= width as i64 {
                    continue;
                }
                let (p0, p1) = (y * width + xs as usize, y * width + x as usize);
                for j in 0..d[0].ncols() {
                    let diff = w * (d[0][(p0, j)] - d[1][(p1, j)]);
                    g[0][(p0, j)] += diff;
                    g[1][(p1, j)] -= diff;
                }
            }
        }
    }
    g
}

/// Target camera and second context pose in the first context camera's
/// frame, with the context baseline scaled to 1.
pub fn relative_cameras(
    c1: &CameraView,
    c2: &CameraView,
    t: &CameraView,
) -> Result<(CameraView, RelativePose)> {
    let ([a, b, tt], _) = normalize_pair_scale(c1, c2, t)?;
    let inv = a.pose.inverse();
    Ok((tt.with_pose(inv.compose(&tt.pose)), inv.compose(&b.pose)))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Decoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: &ModelConfig) -> Self {
        let up = Linear::new(store, rng, &format!("{name}.up"), c.dim, c.decoder_dim, 1.0);
        let sub = store.add(
            format!("{name}.sub"),
            random_mat(rng, c.patch * c.patch, c.decoder_dim, 0.1),
        );
        let out = Linear::new(
            store,
            rng,
            &format!("{name}.out"),
            c.decoder_dim,
            c.decoder_dim,
            1.0,
        );
        Self { up, sub, out }
    }

    fn forward(&self, store: &ParamStore, grid: &Grid, f: &Mat) -> DecoderCache {
        let ft = f * store.get(self.up.w).transpose();
        let sub = store.get(self.sub);
        let bias = store.get(self.up.b);
        let (n, c) = (grid.token.len(), ft.ncols());
        let mut pre1 = Mat::zeros(n, c);
        for p in 0..n {
            let (k, s) = (grid.token[p], grid.sub[p]);
            for j in 0..c {
                pre1[(p, j)] = ft[(k, j)] + sub[(s, j)] + bias[j];
            }
        }
        let a = relu(&pre1);
        let pre2 = self.out.forward(store, &a);
        let out = relu(&pre2);
        DecoderCache { pre1, a, pre2, out }
    }

    fn backward(
        &self,
        store: &ParamStore,
        grads: &mut ParamStore,
        grid: &Grid,
        f: &Mat,
        cache: &DecoderCache,
        d_out: &Mat,
    ) -> Mat {
        let dpre2 = relu_backward(&cache.pre2, d_out);
        let da = self.out.backward(store, grads, &cache.a, &dpre2);
        let dpre1 = relu_backward(&cache.pre1, &da);
        let c = dpre1.ncols();
        let mut dft = Mat::zeros(f.nrows(), c);
        {
            let dsub = grads.get_mut(self.sub);
            for p in 0..grid.token.len() {
                let (k, s) = (grid.token[p], grid.sub[p]);
                for j in 0..c {
                    let g = dpre1[(p, j)];
                    dft[(k, j)] += g;
                    dsub[(s, j)] += g;
                }
            }
        }
        self.up.backward(store, grads, f, &dft)
    }
}

impl Model {
    /// Fresh model with seeded weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let patch_in = c.patch * c.patch * 3;
        let patch = Linear::new(&mut s, &mut rng, "encoder.patch", patch_in, c.dim, 1.0);
        let pos = s.add("encoder.pos", random_mat(&mut rng, c.tokens(), c.dim, 0.1));
        let view = s.add("encoder.view", random_mat(&mut rng, 2, c.dim, 0.1));
        let blocks = (0..c.blocks)
            .map(|b| {
                (
                    Linear::new(
                        &mut s,
                        &mut rng,
                        &format!("encoder.block{b}.fc1"),
                        c.dim,
                        2 * c.dim,
                        1.0,
                    ),
                    Linear::new(
                        &mut s,
                        &mut rng,
                        &format!("encoder.block{b}.fc2"),
                        2 * c.dim,
                        c.dim,
                        0.5,
                    ),
                )
            })
            .collect();
        let gate_x = Linear::new(&mut s, &mut rng, "encoder.mix.gate_x", c.dim, c.dim, 1.0);
        let gate_m = s.add(
            "encoder.mix.gate_m",
            random_mat(&mut rng, c.dim, c.dim, (2.0 / c.dim as f64).sqrt()),
        );
        let mix = Linear::new(&mut s, &mut rng, "encoder.mix.update", c.dim, c.dim, 1.0);
        let geo = [
            Decoder::new(&mut s, &mut rng, "geometry.decoder0", c),
            Decoder::new(&mut s, &mut rng, "geometry.decoder1", c),
        ];
        let f0 = c.width as f64 / (2.0 * (c.nominal_fov_deg.to_radians() / 2.0).tan());
        let mut loc_w = [P(0); 2];
        let mut loc_bias = [P(0); 2];
        for v in 0..2 {
            loc_w[v] = s.add(
                format!("geometry.loc{v}.w"),
                random_mat(
                    &mut rng,
                    3,
                    c.decoder_dim,
                    0.01 / (c.decoder_dim as f64).sqrt(),
                ),
            );
            // A fronto-parallel plane at init_depth, one point per pixel ray.
            let mut plane = Mat::zeros(c.pixels(), 3);
            for y in 0..c.height {
                for x in 0..c.width {
                    let p = y * c.width + x;
                    plane[(p, 0)] = (x as f64 + 0.5 - c.width as f64 / 2.0) / f0 * c.init_depth;
                    plane[(p, 1)] = (y as f64 + 0.5 - c.height as f64 / 2.0) / f0 * c.init_depth;
                    plane[(p, 2)] = c.init_depth;
                }
            }
            loc_bias[v] = s.add(format!("geometry.loc{v}.pixel_bias"), plane);
        }
        let descriptor = Linear::new(
            &mut s,
            &mut rng,
            "geometry.pose.descriptor",
            27,
            DESCRIPTOR_DIM,
            1.0,
        );
        let pose_in = POSE_BANDS * (2 * c.max_shift() + 1) + 2 * c.dim;
        let pose_hidden = Linear::new(
            &mut s,
            &mut rng,
            "geometry.pose.fc1",
            pose_in,
            c.head_hidden,
            1.0,
        );
        let pose_out = Linear::new(&mut s, &mut rng, "geometry.pose.fc2", c.head_hidden, 7, 0.1);
        s.get_mut(pose_out.b)[0] = 1.0;
        let attr = Decoder::new(&mut s, &mut rng, "attribute.decoder", c);
        let app_image = c.image_shortcut.then(|| {
            s.add(
                "attribute.appearance.image",
                random_mat(&mut rng, c.decoder_dim, 3, 1.0),
            )
        });
        let app_hidden = Linear::new(
            &mut s,
            &mut rng,
            "attribute.appearance.fc1",
            c.decoder_dim,
            c.head_hidden,
            1.0,
        );
        let app_out = Linear::new(
            &mut s,
            &mut rng,
            "attribute.appearance.fc2",
            c.head_hidden,
            ATTR,
            0.1,
        );
        {
            // Identity rotations and footprints of about a pixel on the initial plane.
            let s0 = (0.7 * c.init_depth / f0).clamp(c.scale_min * 1.01, c.scale_max * 0.99);
            let frac = (s0.ln() - c.scale_min.ln()) / (c.scale_max.ln() - c.scale_min.ln());
            let b = s.get_mut(app_out.b);
            b[0] = 1.0;
            for k in 4..7 {
                b[k] = logit(frac);
            }
        }
        let sem = c.semantic_head.then(|| {
            let image = c.image_shortcut.then(|| {
                s.add(
                    "attribute.semantic.image",
                    random_mat(&mut rng, c.decoder_dim, 3, 1.0),
                )
            });
            let semantic = c.semantic_shortcut.then(|| {
                s.add(
                    "attribute.semantic.shortcut",
                    random_mat(&mut rng, c.decoder_dim, c.feature_dim, 1.0),
                )
            });
            let hidden = Linear::new(
                &mut s,
                &mut rng,
                "attribute.semantic.fc1",
                c.decoder_dim,
                c.head_hidden,
                1.0,
            );
            let out = Linear::new(
                &mut s,
                &mut rng,
                "attribute.semantic.fc2",
                c.head_hidden,
                c.feature_dim,
                1.0,
            );
            SemanticHead {
                image,
                semantic,
                hidden,
                out,
            }
        });
        let layers = Layers {
            patch,
            pos,
            view,
            blocks,
            gate_x,
            gate_m,
            mix,
            geo,
            loc_w,
            loc_bias,
            descriptor,
            pose_hidden,
            pose_out,
            attr,
            app_image,
            app_hidden,
            app_out,
            sem,
        };
        Ok(Self {
            config,
            params: s,
            teacher: None,
            layers,
            grid: Grid::new(c),
        })
    }

    pub fn with_teacher(mut self, teacher: SemanticTeacher) -> Self {
        self.teacher = Some(teacher);
        self
    }

    fn check_image(&self, img: &ImageBuf, channels: usize, what: &str) -> Result<()> {
        let c = &self.config;
        if img.width != c.width || img.height != c.height || img.channels != channels {
            return Err(Error::Dimension(format!(
                "{what} is {}x{}x{}, model expects {}x{}x{channels}",
                img.width, img.height, img.channels, c.width, c.height
            )));
        }
        if !img.is_finite() {
            return Err(Error::Numeric(format!("{what} has non-finite values")));
        }
        Ok(())
    }

    fn patches(&self, img: &ImageBuf) -> Mat {
        let c = &self.config;
        let (tw, p) = (c.width / c.patch, c.patch);
        let mut m = Mat::zeros(c.tokens(), p * p * 3);
        for t in 0..c.tokens() {
            let (ty, tx) = (t / tw, t % tw);
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..3 {
                        m[(t, k)] = img.get(tx * p + px, ty * p + py, ch);
                        k += 1;
                    }
                }
            }
        }
        m
    }

    fn pixels_mat(img: &ImageBuf) -> Mat {
        Mat::from_row_slice(img.pixels(), img.channels, &img.data)
    }

    /// Per-view encoder stream up to (not including) the mixing block.
    fn encode_view(&self, img: &ImageBuf, v: usize) -> (Mat, Vec<Mat>, Vec<Mat>, Vec<Mat>) {
        let s = &self.params;
        let l = &self.layers;
        let patches = self.patches(img);
        let mut e = l.patch.forward(s, &patches);
        e += s.get(l.pos);
        add_row(&mut e, &s.get(l.view).rows(v, 1).into_owned());
        let mut stream = vec![e];
        let mut pres = Vec::new();
        let mut hs = Vec::new();
        for (fc1, fc2) in &l.blocks {
            let x = stream.last().unwrap();
            let pre = fc1.forward(s, x);
            let h = relu(&pre);
            let next = x + fc2.forward(s, &h);
            pres.push(pre);
            hs.push(h);
            stream.push(next);
        }
        (patches, stream, pres, hs)
    }

    /// Shared-weight encoder with one cross-view mixing block.
    pub fn encode(&self, img0: &ImageBuf, img1: &ImageBuf) -> Result<[FeatureTensor; 2]> {
        self.check_image(img0, 3, "image 0")?;
        self.check_image(img1, 3, "image 1")?;
        let (_, s0, _, _) = self.encode_view(img0, 0);
        let (_, s1, _, _) = self.encode_view(img1, 1);
        let pre = [s0.last().unwrap().clone(), s1.last().unwrap().clone()];
        let (tw, th) = (
            self.config.width / self.config.patch,
            self.config.height / self.config.patch,
        );
        let out = [0, 1].map(|v| {
            let (_, _, feat) = self.mix(&pre[v], &pre[1 - v]);
            FeatureTensor::from_mat(&feat, tw, th)
        });
        Ok(out)
    }

    /// Gated update of `x` by the mean token of the other view. Returns
    /// (gate, update row, mixed tokens).
    fn mix(&self, x: &Mat, other: &Mat) -> (Mat, Mat, Mat) {
        let s = &self.params;
        let l = &self.layers;
        let m = col_mean(other);
        let mut gate_pre = l.gate_x.forward(s, x);
        add_row(&mut gate_pre, &(&m * s.get(l.gate_m).transpose()));
        let gate = gate_pre.map(sigmoid);
        let update = l.mix.forward(s, &m);
        let mut out = x.clone();
        for r in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[(r, j)] += gate[(r, j)] * update[j];
            }
        }
        (gate, update, out)
    }

    fn run(&self, images: [&ImageBuf; 2], semantics: [&ImageBuf; 2]) -> Result<Cache> {
        for v in 0..2 {
            self.check_image(images[v], 3, &format!("image {v}"))?;
            self.check_image(
                semantics[v],
                self.config.feature_dim,
                &format!("semantic map {v}"),
            )?;
        }
        let s = &self.params;
        let l = &self.layers;
        let enc: Vec<_> = (0..2).map(|v| self.encode_view(images[v], v)).collect();
        let pre = [
            enc[0].1.last().unwrap().clone(),
            enc[1].1.last().unwrap().clone(),
        ];
        let means = [col_mean(&pre[0]), col_mean(&pre[1])];
        let mut views = Vec::with_capacity(2);
        let mut updates = [Mat::zeros(0, 0), Mat::zeros(0, 0)];
        for (v, (patches, stream, block_pre, block_h)) in enc.into_iter().enumerate() {
            let (gate, update, feat) = self.mix(&pre[v], &pre[1 - v]);
            updates[v] = update;
            let geo = l.geo[v].forward(s, &self.grid, &feat);
            let mut positions = &geo.out * s.get(l.loc_w[v]).transpose();
            positions += s.get(l.loc_bias[v]);
            let attr = l.attr.forward(s, &self.grid, &feat);
            let image = Self::pixels_mat(images[v]);
            let semantic = Self::pixels_mat(semantics[v]);
            let mut app_in = attr.out.clone();
            if let Some(p) = l.app_image {
                app_in += &image * s.get(p).transpose();
            }
            let app_pre = l.app_hidden.forward(s, &app_in);
            let app_h = relu(&app_pre);
            let app_raw = l.app_out.forward(s, &app_h);
            let (sem_pre, sem_h, feat_out) = match &l.sem {
                Some(h) => {
                    let mut x = attr.out.clone();
                    if let Some(p) = h.image {
                        x += &image * s.get(p).transpose();
                    }
                    if let Some(p) = h.semantic {
                        x += &semantic * s.get(p).transpose();
                    }
                    let pre = h.hidden.forward(s, &x);
                    let hh = relu(&pre);
                    let out = h.out.forward(s, &hh);
                    (Some(pre), Some(hh), out)
                }
                None => (
                    None,
                    None,
                    Mat::zeros(self.config.pixels(), self.config.feature_dim),
                ),
            };
            views.push(ViewCache {
                patches,
                stream,
                block_pre,
                block_h,
                gate,
                feat,
                geo,
                attr,
                image,
                semantic,
                app_in,
                app_pre,
                app_h,
                app_raw,
                sem_pre,
                sem_h,
                feat_out,
                positions,
            });
        }
        let neigh = [0, 1].map(|v| neighbourhoods(images[v]));
        let desc = [0, 1].map(|v| l.descriptor.forward(s, &neigh[v]));
        let cost = cost_volume(
            &desc[0],
            &desc[1],
            self.config.width,
            self.config.max_shift(),
        );
        let mut pose_pooled = Mat::zeros(1, cost.len() + 2 * self.config.dim);
        for (k, v) in cost.iter().enumerate() {
            pose_pooled[k] = *v;
        }
        for v in 0..2 {
            let m = col_mean(&views[v].feat);
            for j in 0..self.config.dim {
                pose_pooled[cost.len() + v * self.config.dim + j] = m[j];
            }
        }
        let pose_pre = l.pose_hidden.forward(s, &pose_pooled);
        let pose_h = relu(&pose_pre);
        let raw = l.pose_out.forward(s, &pose_h);
        let pose_raw = [0, 1, 2, 3, 4, 5, 6].map(|k| raw[k]);
        Ok(Cache {
            views,
            means,
            updates,
            neigh,
            desc,
            cost,
            pose_pooled,
            pose_pre,
            pose_h,
            pose_raw,
        })
    }

    fn pose_of(raw: &[f64; 7]) -> Result<RelativePose> {
        let q = Quaternion::new(raw[0], raw[1], raw[2], raw[3])
            .canonicalize()
            .map_err(|e| Error::Numeric(format!("pose head: {e}")))?;
        Ok(RelativePose {
            rotation: q,
            translation: Vector3::new(raw[4], raw[5], raw[6]),
        })
    }

    fn attributes_of(&self, vc: &ViewCache) -> Result<AttributeOutput> {
        let c = &self.config;
        let (lo, span) = (c.scale_min.ln(), c.scale_max.ln() - c.scale_min.ln());
        let n = c.pixels();
        let mut out = AttributeOutput {
            rot: Vec::with_capacity(n),
            scale: Vec::with_capacity(n),
            opacity: Vec::with_capacity(n),
            color: Vec::with_capacity(n),
            feat: Vec::with_capacity(n * c.feature_dim),
        };
        for p in 0..n {
            let r = |k: usize| vc.app_raw[(p, k)];
            let q = Quaternion::new(r(0), r(1), r(2), r(3))
                .canonicalize()
                .map_err(|e| Error::Numeric(format!("rotation head: {e}")))?;
            out.rot.push(q);
            out.scale.push(Vector3::from_fn(|i, _| {
                (lo + span * sigmoid(r(4 + i))).exp()
            }));
            out.opacity
                .push(OPACITY_EPS + (1.0 - 2.0 * OPACITY_EPS) * sigmoid(r(7)));
            out.color
                .push([sigmoid(r(8)), sigmoid(r(9)), sigmoid(r(10))]);
            out.feat.extend(vc.feat_out.row(p).iter());
        }
        Ok(out)
    }

    fn assemble(&self, cache: &Cache) -> Result<PredictedScene> {
        let n = self.config.feature_dim;
        let mut gaussians = Vec::with_capacity(2 * self.config.pixels());
        for vc in &cache.views {
            let a = self.attributes_of(vc)?;
            for p in 0..self.config.pixels() {
                gaussians.push(SemanticGaussian3D {
                    mu: Vector3::new(
                        vc.positions[(p, 0)],
                        vc.positions[(p, 1)],
                        vc.positions[(p, 2)],
                    ),
                    rot: a.rot[p],
                    scale: a.scale[p],
                    opacity: a.opacity[p],
                    color: a.color[p],
                    feat: a.feat[p * n..(p + 1) * n].to_vec(),
                });
            }
        }
        let scene = GaussianScene::from_gaussians(n, gaussians);
        scene
            .validate()
            .map_err(|e| Error::Numeric(format!("model produced an invalid gaussian: {e}")))?;
        Ok(PredictedScene {
            scene,
            pose: Self::pose_of(&cache.pose_raw)?,
        })
    }

    /// Geometry branch of one view: per-pixel centers in the first view's
    /// frame, plus the relative pose for view 1.
    pub fn decode_geometry(
        &self,
        images: [&ImageBuf; 2],
        semantics: [&ImageBuf; 2],
        view: usize,
    ) -> Result<GeometryOutput> {
        if view > 1 {
            return Err(Error::Dimension(format!("view must be 0 or 1, got {view}")));
        }
        let cache = self.run(images, semantics)?;
        let vc = &cache.views[view];
        Ok(GeometryOutput {
            positions: (0..self.config.pixels())
                .map(|p| {
                    Vector3::new(
                        vc.positions[(p, 0)],
                        vc.positions[(p, 1)],
                        vc.positions[(p, 2)],
                    )
                })
                .collect(),
            pose: if view == 1 {
                Some(Self::pose_of(&cache.pose_raw)?)
            } else {
                None
            },
        })
    }

    /// Attribute branch of one view.
    pub fn decode_attributes(
        &self,
        images: [&ImageBuf; 2],
        semantics: [&ImageBuf; 2],
        view: usize,
    ) -> Result<AttributeOutput> {
        if view > 1 {
            return Err(Error::Dimension(format!("view must be 0 or 1, got {view}")));
        }
        let cache = self.run(images, semantics)?;
        self.attributes_of(&cache.views[view])
    }

    pub fn forward(
        &self,
        images: [&ImageBuf; 2],
        semantics: [&ImageBuf; 2],
    ) -> Result<PredictedScene> {
        let cache = self.run(images, semantics)?;
        self.assemble(&cache)
    }

    /// Reconstruct from two images alone. Semantic shortcut inputs come from
    /// the model's own image-only teacher.
    pub fn infer(&self, img0: &ImageBuf, img1: &ImageBuf) -> Result<(PredictedScene, Duration)> {
        let start = Instant::now();
        let teacher = self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::NotInitialized("model has no semantic teacher".into()))?;
        if teacher.feature_dim() != self.config.feature_dim {
            return Err(Error::Dimension(
                "teacher and model feature dimensions differ".into(),
            ));
        }
        self.check_image(img0, 3, "image 0")?;
        self.check_image(img1, 3, "image 1")?;
        let f0 = teacher.features(img0)?;
        let f1 = teacher.features(img1)?;
        let scene = self.forward([img0, img1], [&f0, &f1])?;
        let elapsed = start.elapsed();
        log::info!("inference took {:.3} ms", elapsed.as_secs_f64() * 1e3);
        Ok((scene, elapsed))
    }

    fn backward(
        &self,
        cache: &Cache,
        g: &RenderGradients,
        pose_t: Vector3<f64>,
        pose_q: [f64; 4],
        grads: &mut ParamStore,
    ) {
        let s = &self.params;
        let l = &self.layers;
        let c = &self.config;
        let (hw, n) = (c.pixels(), c.feature_dim);
        let (lo, span) = (c.scale_min.ln(), c.scale_max.ln() - c.scale_min.ln());

        // Pose head.
        let raw_q = [
            cache.pose_raw[0],
            cache.pose_raw[1],
            cache.pose_raw[2],
            cache.pose_raw[3],
        ];
        let dq = canonicalize_backward(&raw_q, &pose_q);
        let d_raw = Mat::from_row_slice(
            1,
            7,
            &[dq[0], dq[1], dq[2], dq[3], pose_t.x, pose_t.y, pose_t.z],
        );
        let dh = l.pose_out.backward(s, grads, &cache.pose_h, &d_raw);
        let dpre = relu_backward(&cache.pose_pre, &dh);
        let dpooled = l.pose_hidden.backward(s, grads, &cache.pose_pooled, &dpre);
        let cost_len = POSE_BANDS * (2 * c.max_shift() + 1);
        let d_desc = cost_volume_backward(
            &cache.desc,
            &cache.cost,
            &dpooled.as_slice()[..cost_len],
            c.width,
            c.max_shift(),
        );
        for v in 0..2 {
            l.descriptor
                .backward_params(grads, &cache.neigh[v], &d_desc[v]);
        }

        let mut d_feat = [Mat::zeros(0, 0), Mat::zeros(0, 0)];
        for (v, vc) in cache.views.iter().enumerate() {
            let base = v * hw;
            // Gaussian parameters back to raw head outputs.
            let mut d_pos = Mat::zeros(hw, 3);
            let mut d_app = Mat::zeros(hw, ATTR);
            let mut d_sem = Mat::zeros(hw, n);
            for p in 0..hw {
                let i = base + p;
                for k in 0..3 {
                    d_pos[(p, k)] = g.mu[i][k];
                }
                let raw = [0, 1, 2, 3].map(|k| vc.app_raw[(p, k)]);
                let dr = canonicalize_backward(&raw, &g.rot[i]);
                for k in 0..4 {
                    d_app[(p, k)] = dr[k];
                }
                for k in 0..3 {
                    let sg = sigmoid(vc.app_raw[(p, 4 + k)]);
                    let scale = (lo + span * sg).exp();
                    d_app[(p, 4 + k)] = g.scale[i][k] * scale * span * sg * (1.0 - sg);
                }
                let so = sigmoid(vc.app_raw[(p, 7)]);
                d_app[(p, 7)] = g.opacity[i] * (1.0 - 2.0 * OPACITY_EPS) * so * (1.0 - so);
                for k in 0..3 {
                    let sc = sigmoid(vc.app_raw[(p, 8 + k)]);
                    d_app[(p, 8 + k)] = g.color[i][k] * sc * (1.0 - sc);
                }
                for k in 0..n {
                    d_sem[(p, k)] = g.feat[i * n + k];
                }
            }

            // Geometry branch.
            *grads.get_mut(l.loc_bias[v]) += &d_pos;
            *grads.get_mut(l.loc_w[v]) += d_pos.transpose() * &vc.geo.out;
            let d_geo = &d_pos * s.get(l.loc_w[v]);
            let mut df = l.geo[v].backward(s, grads, &self.grid, &vc.feat, &vc.geo, &d_geo);

            // Attribute branch.
            let dh = l.app_out.backward(s, grads, &vc.app_h, &d_app);
            let dpre = relu_backward(&vc.app_pre, &dh);
            let d_app_in = l.app_hidden.backward(s, grads, &vc.app_in, &dpre);
            if let Some(p) = l.app_image {
                *grads.get_mut(p) += d_app_in.transpose() * &vc.image;
            }
            let mut d_attr = d_app_in;
            if let (Some(h), Some(pre), Some(hh)) = (&l.sem, &vc.sem_pre, &vc.sem_h) {
                let dhh = h.out.backward(s, grads, hh, &d_sem);
                let dpre = relu_backward(pre, &dhh);
                // The hidden layer's input is not cached; rebuild it.
                let mut x = vc.attr.out.clone();
                if let Some(p) = h.image {
                    x += &vc.image * s.get(p).transpose();
                }
                if let Some(p) = h.semantic {
                    x += &vc.semantic * s.get(p).transpose();
                }
                let dx = h.hidden.backward(s, grads, &x, &dpre);
                if let Some(p) = h.image {
                    *grads.get_mut(p) += dx.transpose() * &vc.image;
                }
                if let Some(p) = h.semantic {
                    *grads.get_mut(p) += dx.transpose() * &vc.semantic;
                }
                d_attr += dx;
            }
            df += l
                .attr
                .backward(s, grads, &self.grid, &vc.feat, &vc.attr, &d_attr);
            let offset = cost_len + v * c.dim;
            let d_mean = Mat::from_fn(1, c.dim, |_, j| dpooled[offset + j] / df.nrows() as f64);
            add_row(&mut df, &d_mean);
            d_feat[v] = df;
        }

        // Mixing block. Each view's tokens receive their own gradient plus
        // the share flowing back through the other view's mean.
        let mut d_stream = [d_feat[0].clone(), d_feat[1].clone()];
        let mut d_mean = [Mat::zeros(1, c.dim), Mat::zeros(1, c.dim)];
        for v in 0..2 {
            let vc = &cache.views[v];
            let x = vc.stream.last().unwrap();
            let u = &cache.updates[v];
            let d_out = &d_feat[v];
            let mut d_gate_pre = Mat::zeros(d_out.nrows(), d_out.ncols());
            let mut d_u = Mat::zeros(1, c.dim);
            for r in 0..d_out.nrows() {
                for j in 0..d_out.ncols() {
                    let gt = vc.gate[(r, j)];
                    d_gate_pre[(r, j)] = d_out[(r, j)] * u[j] * gt * (1.0 - gt);
                    d_u[j] += d_out[(r, j)] * gt;
                }
            }
            let m_other = &cache.means[1 - v];
            d_stream[v] += l.gate_x.backward(s, grads, x, &d_gate_pre);
            let gsum = col_sum(&d_gate_pre);
            *grads.get_mut(l.gate_m) += gsum.transpose() * m_other;
            d_mean[1 - v] += &gsum * s.get(l.gate_m);
            d_mean[1 - v] += l.mix.backward(s, grads, m_other, &d_u);
        }
        for v in 0..2 {
            let tokens = d_stream[v].nrows() as f64;
            add_row(&mut d_stream[v], &(&d_mean[v] / tokens));
        }

        // Residual blocks and patch embedding.
        for (v, vc) in cache.views.iter().enumerate() {
            let mut d = d_stream[v].clone();
            for b in (0..l.blocks.len()).rev() {
                let (fc1, fc2) = &l.blocks[b];
                let dh = fc2.backward(s, grads, &vc.block_h[b], &d);
                let dpre = relu_backward(&vc.block_pre[b], &dh);
                d += fc1.backward(s, grads, &vc.stream[b], &dpre);
            }
            l.patch.backward_params(grads, &vc.patches, &d);
            *grads.get_mut(l.pos) += &d;
            let row = col_sum(&d);
            let mut view = grads.get_mut(l.view).rows_mut(v, 1);
            view += row;
        }
    }

    /// Loss breakdown of one triple and, when `want_grad`, the gradient of
    /// the total loss with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        t: &TrainingTriple,
        weights: &LossWeights,
        settings: &RenderSettings,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<ParamStore>)> {
        let cache = self.run(t.context_rgb, t.context_sem)?;
        let pred = self.assemble(&cache)?;
        let cam = &t.target_camera;
        if (
            t.target_rgb.width,
            t.target_rgb.height,
            t.target_rgb.channels,
        ) != (cam.width, cam.height, 3)
        {
            return Err(Error::Dimension(
                "target image does not match the target camera".into(),
            ));
        }
        let (out, state) = render_with(settings, &pred.scene, cam, [0.0; 3])?;
        let (photo, d_rgb) = photometric_loss_with_grad(
            t.target_rgb,
            &out.rgb,
            weights.eta,
            PhotometricDistance::Rms,
        )?;
        let (sem, d_feat) = semantic_loss_with_grad(&out.feature, t.target_sem)?;
        let pose =
            pose_loss_with_grad(&pred.pose.translation, &pred.pose.rotation, &t.context_pose)?;
        let losses = LossBreakdown::new(photo, pose.value, sem, weights);
        if !want_grad {
            return Ok((losses, None));
        }
        let mut up = RenderUpstream::zeros(cam.width, cam.height, self.config.feature_dim);
        up.rgb = d_rgb;
        up.feature = d_feat;
        up.feature
            .data
            .iter_mut()
            .for_each(|v| *v *= weights.lambda_sem);
        let rg = render_backward(&state, &pred.scene, cam, &up)?;
        let mut grads = self.params.zeros_like();
        let pt = pose.grad_translation * weights.lambda_pose;
        let pq = pose.grad_rotation.map(|v| v * weights.lambda_pose);
        self.backward(&cache, &rg, pt, pq, &mut grads);
        Ok((losses, Some(grads)))
    }

    /// One Adam step on a triple. Non-finite losses or gradients leave the
    /// parameters untouched.
    pub fn training_step(
        &mut self,
        t: &TrainingTriple,
        adam: &mut Adam,
        weights: &LossWeights,
    ) -> Result<StepOutcome> {
        self.training_step_batch(std::slice::from_ref(t), adam, weights)
    }

    /// One Adam step on the mean loss of several triples.
    pub fn training_step_batch(
        &mut self,
        batch: &[TrainingTriple],
        adam: &mut Adam,
        weights: &LossWeights,
    ) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::Dimension("empty training batch".into()));
        }
        let rejected = |losses| {
            Ok(StepOutcome {
                losses,
                applied: false,
            })
        };
        let nan = LossBreakdown {
            photo: f64::NAN,
            pose: f64::NAN,
            sem: f64::NAN,
            total: f64::NAN,
        };
        let k = batch.len() as f64;
        let mut sum = LossBreakdown {
            photo: 0.0,
            pose: 0.0,
            sem: 0.0,
            total: 0.0,
        };
        let mut total_grad: Option<ParamStore> = None;
        for t in batch {
            let (losses, grads) =
                match self.loss_and_grad(t, weights, &RenderSettings::default(), true) {
                    Ok(v) => v,
                    Err(Error::Numeric(msg)) => {
                        log::warn!("training step rejected: {msg}");
                        return rejected(nan);
                    }
                    Err(e) => return Err(e),
                };
            let grads = grads.expect("gradient requested");
            if !losses.is_finite() || !grads.is_finite() {
                log::warn!("training step rejected: non-finite loss or gradient ({losses:?})");
                return rejected(losses);
            }
            sum.photo += losses.photo / k;
            sum.pose += losses.pose / k;
            sum.sem += losses.sem / k;
            sum.total += losses.total / k;
            match &mut total_grad {
                None => total_grad = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.tensors.iter_mut().zip(&grads.tensors) {
                        *a += g;
                    }
                }
            }
        }
        let mut grads = total_grad.expect("non-empty batch");
        if batch.len() > 1 {
            grads.tensors.iter_mut().for_each(|t| *t /= k);
        }
        adam.update(&mut self.params, &grads);
        Ok(StepOutcome {
            losses: sum,
            applied: true,
        })
    }

    /// Rebuild a model around stored parameters.
    pub fn from_params(
        config: ModelConfig,
        params: &ParamStore,
        teacher: Option<SemanticTeacher>,
    ) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.assign(params).map_err(|e| Error::Format {
            offset: 0,
            message: format!("checkpoint does not fit the model configuration: {e}"),
        })?;
        m.teacher = teacher;
        Ok(m)
    }

    /// Gradient norm per layer (weights and bias together), for spotting
    /// dead branches.
    pub fn gradient_norms(grads: &ParamStore) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for (name, t) in grads.names.iter().zip(&grads.tensors) {
            let key = name
                .strip_suffix(".w")
                .or_else(|| name.strip_suffix(".b"))
                .unwrap_or(name)
                .to_string();
            let sq = t.norm_squared();
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some(e) => e.1 += sq,
                None => out.push((key, sq)),
            }
        }
        out.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
    }
}
