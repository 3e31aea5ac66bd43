//! Procedural rooms, camera orbits and rendered datasets with an exact
//! semantic oracle.
//!
//! World frame: y points down (matching the camera convention), the room is
//! centered on the origin. Walls, floor and ceiling are grids of flattened
//! gaussians; objects are small clusters standing on the floor.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{look_at, CameraView, Quaternion, SemanticGaussian3D};
use crate::image::ImageBuf;
use crate::io::{self, ByteReader, ByteWriter};
use crate::metrics::{segment_feature_map, LabelMap, BACKGROUND};
use crate::render::{render, GaussianScene};

pub const CLASS_NAMES: [&str; 7] = [
    "wall", "floor", "ceiling", "chair", "table", "door", "others",
];
pub const MAX_CLASSES: usize = 16;
const WALL: usize = 0;
const FLOOR: usize = 1;
const CEILING: usize = 2;
const DOOR: usize = 5;

const BASE_PALETTE: [[f64; 3]; 7] = [
    [0.78, 0.74, 0.66],
    [0.46, 0.30, 0.18],
    [0.93, 0.93, 0.96],
    [0.82, 0.20, 0.16],
    [0.22, 0.42, 0.78],
    [0.28, 0.62, 0.30],
    [0.88, 0.72, 0.18],
];

pub fn class_name(k: usize) -> String {
    CLASS_NAMES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{k}"))
}

/// Standard normal draw (Box-Muller).
fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    /// Room half sizes along x, y (vertical) and z.
    pub half_extent: [f64; 3],
    /// Gaussians per side of each wall/floor/ceiling grid.
    pub plane_grid: usize,
    pub objects: usize,
    pub gaussians_per_object: usize,
    /// Number of classes C; the first three are wall, floor, ceiling.
    pub classes: usize,
    /// Semantic feature dimension N.
    pub feature_dim: usize,
    /// Per-gaussian color perturbation amplitude.
    pub color_jitter: f64,
    /// Seed of the class embedding table. Kept apart from the scene seed so
    /// that every scene of a family shares one semantic space.
    pub embedding_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            half_extent: [2.0, 1.0, 2.0],
            plane_grid: 8,
            objects: 4,
            gaussians_per_object: 10,
            classes: 7,
            feature_dim: 8,
            color_jitter: 0.02,
            embedding_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(3..=MAX_CLASSES).contains(&self.classes) {
            bad.push(format!(
                "scene.classes = {} must lie in [3, {MAX_CLASSES}]",
                self.classes
            ));
        }
        if self.feature_dim < self.classes {
            bad.push(format!(
                "scene.feature_dim = {} must be >= scene.classes = {} for orthogonal class embeddings",
                self.feature_dim, self.classes
            ));
        }
        if self
            .half_extent
            .iter()
            .any(|&e| !(e > 0.0 && e.is_finite()))
        {
            bad.push("scene.half_extent must be positive".into());
        }
        if self.plane_grid == 0 {
            bad.push("scene.plane_grid must be >= 1".into());
        }
        if self.objects > 0 && self.gaussians_per_object == 0 {
            bad.push("scene.gaussians_per_object must be >= 1 when objects are requested".into());
        }
        if self.objects > 0 && self.classes <= 3 {
            bad.push("objects need at least one object class (scene.classes > 3)".into());
        }
        if !(0.0..=0.5).contains(&self.color_jitter) {
            bad.push("scene.color_jitter must lie in [0, 0.5]".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// A scene whose gaussians carry their class embedding as feature.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub scene: GaussianScene,
    pub class_ids: Vec<usize>,
    /// C×N unit rows, mutually orthogonal.
    pub table: Vec<Vec<f64>>,
    /// Base color per class.
    pub palette: Vec<[f64; 3]>,
}

impl LabeledScene {
    pub fn classes(&self) -> usize {
        self.table.len()
    }
}

fn palette(classes: usize) -> Vec<[f64; 3]> {
    (0..classes)
        .map(|k| {
            BASE_PALETTE.get(k).copied().unwrap_or_else(|| {
                // Extra classes: evenly spaced hues at medium saturation.
                let h = (k as f64 * 0.618_033_988_75).fract() * 6.0;
                let x = 1.0 - (h % 2.0 - 1.0).abs();
                let (r, g, b) = match h as usize {
                    0 => (1.0, x, 0.0),
                    1 => (x, 1.0, 0.0),
                    2 => (0.0, 1.0, x),
                    3 => (0.0, x, 1.0),
                    4 => (x, 0.0, 1.0),
                    _ => (1.0, 0.0, x),
                };
                [0.2 + 0.6 * r, 0.2 + 0.6 * g, 0.2 + 0.6 * b]
            })
        })
        .collect()
}

/// First `classes` rows of a seeded random orthogonal `n`×`n` matrix.
pub fn class_embeddings(rng: &mut ChaCha8Rng, classes: usize, n: usize) -> Vec<Vec<f64>> {
    let m = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let q = m.qr().q();
    (0..classes)
        .map(|k| (0..n).map(|j| q[(j, k)]).collect())
        .collect()
}

pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<LabeledScene> {
    spec.validate()?;
    let table = class_embeddings(
        &mut ChaCha8Rng::seed_from_u64(spec.embedding_seed ^ 0x656d_6265_6464_0000),
        spec.classes,
        spec.feature_dim,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = palette(spec.classes);
    let [hx, hy, hz] = spec.half_extent;
    let mut gaussians = Vec::new();
    let mut class_ids = Vec::new();

    let mut push = |rng: &mut ChaCha8Rng,
                    class: usize,
                    mu: Vector3<f64>,
                    rot: Quaternion,
                    scale: Vector3<f64>,
                    opacity: f64| {
        let base = palette[class];
        let color =
            base.map(|c| (c + spec.color_jitter * rng.gen_range(-1.0..=1.0)).clamp(0.0, 1.0));
        gaussians.push(SemanticGaussian3D {
            mu,
            rot,
            scale,
            opacity,
            color,
            feat: table[class].clone(),
        });
        class_ids.push(class);
    };

    // Axis-aligned planes: (class, normal axis, offset, in-plane axes, half sizes).
    let planes: [(usize, usize, f64, [usize; 2]); 6] = [
        (WALL, 0, -hx, [1, 2]),
        (WALL, 0, hx, [1, 2]),
        (WALL, 2, -hz, [0, 1]),
        (WALL, 2, hz, [0, 1]),
        (FLOOR, 1, hy, [0, 2]),
        (CEILING, 1, -hy, [0, 2]),
    ];
    let g = spec.plane_grid;
    for (class, axis, offset, [a, b]) in planes {
        let (ha, hb) = (spec.half_extent[a], spec.half_extent[b]);
        let (sa, sb) = (2.0 * ha / g as f64, 2.0 * hb / g as f64);
        for i in 0..g {
            for j in 0..g {
                let mut mu = Vector3::zeros();
                mu[axis] = offset;
                mu[a] = -ha + (i as f64 + 0.5) * sa;
                mu[b] = -hb + (j as f64 + 0.5) * sb;
                let mut scale = Vector3::repeat(0.02);
                scale[a] = 0.6 * sa;
                scale[b] = 0.6 * sb;
                push(&mut rng, class, mu, Quaternion::IDENTITY, scale, 0.97);
            }
        }
    }

    let object_classes: Vec<usize> = (3..spec.classes).collect();
    let region = 0.3 * hx.min(hz);
    for _ in 0..spec.objects {
        let class = object_classes[rng.gen_range(0..object_classes.len())];
        if class == DOOR {
            // A flat panel just in front of a random wall, standing on the floor.
            let wall = rng.gen_range(0..4);
            let (axis, sign) = [(0, -1.0), (0, 1.0), (2, -1.0), (2, 1.0)][wall];
            let along = 2 - axis;
            let extent = spec.half_extent[along];
            let center_along = rng.gen_range(-0.6..0.6) * extent;
            let n = spec.gaussians_per_object;
            let rows = n.div_ceil(2);
            for k in 0..n {
                let (col, row) = ((k % 2) as f64, (k / 2) as f64);
                let mut mu = Vector3::zeros();
                mu[axis] = sign * (spec.half_extent[axis] - 0.02);
                mu[along] = center_along + (col - 0.5) * 0.3;
                mu.y = hy - (row + 0.5) * 1.4 * hy / rows as f64;
                let mut scale = Vector3::repeat(0.015);
                scale[along] = 0.2;
                scale.y = 0.8 * hy / rows as f64;
                push(&mut rng, class, mu, Quaternion::IDENTITY, scale, 0.95);
            }
        } else {
            let r = region * rng.gen::<f64>().sqrt();
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let size = rng.gen_range(0.18..0.3);
            let center = Vector3::new(r * phi.cos(), hy - 1.2 * size, r * phi.sin());
            for _ in 0..spec.gaussians_per_object {
                let offset = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng))
                    * (0.45 * size);
                let rot = Quaternion::new(
                    normal(&mut rng),
                    normal(&mut rng),
                    normal(&mut rng),
                    normal(&mut rng),
                )
                .canonicalize()
                .unwrap_or(Quaternion::IDENTITY);
                let scale = Vector3::new(
                    rng.gen_range(0.3..0.7) * size,
                    rng.gen_range(0.3..0.7) * size,
                    rng.gen_range(0.3..0.7) * size,
                );
                let opacity = rng.gen_range(0.85..0.97);
                push(&mut rng, class, center + offset, rot, scale, opacity);
            }
        }
    }

    let scene = GaussianScene::from_gaussians(spec.feature_dim, gaussians);
    scene.validate()?;
    Ok(LabeledScene {
        scene,
        class_ids,
        table,
        palette,
    })
}

// ---------------------------------------------------------------- orbits

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    /// Orbit radius around the room center.
    pub radius: f64,
    /// Yaw step between consecutive frames, degrees.
    pub deg_per_frame: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            fov_deg: 60.0,
            radius: 1.2,
            deg_per_frame: 1.0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.width == 0 || self.height == 0 {
            bad.push("trajectory image size must be positive".to_string());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            bad.push("trajectory.fov_deg must lie in (0, 180)".into());
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            bad.push("trajectory.radius must be positive".into());
        }
        if !(self.deg_per_frame > 0.0 && self.deg_per_frame < 180.0) {
            bad.push("trajectory.deg_per_frame must lie in (0, 180)".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Cameras on a horizontal circle around `center`, all looking at it, with a
/// seeded starting angle and a fixed yaw step.
pub fn generate_trajectory(
    seed: u64,
    n_frames: usize,
    spec: &TrajectorySpec,
    center: Vector3<f64>,
) -> Result<Vec<CameraView>> {
    spec.validate()?;
    if n_frames < 3 {
        return Err(Error::config(format!(
            "trajectory needs at least 3 frames, got {n_frames}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6269_7400_0000);
    let start = rng.gen_range(0.0..std::f64::consts::TAU);
    let step = spec.deg_per_frame.to_radians();
    let up = Vector3::new(0.0, -1.0, 0.0);
    Ok((0..n_frames)
        .map(|i| {
            let a = start + i as f64 * step;
            let eye = center + spec.radius * Vector3::new(a.sin(), 0.0, -a.cos());
            let pose = look_at(eye, center, up);
            CameraView::with_fov(spec.width, spec.height, spec.fov_deg.to_radians(), pose)
        })
        .collect())
}

// --------------------------------------------------------------- dataset

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub frames: usize,
    /// Standard deviation of gaussian noise added to stored feature maps.
    /// Label maps are computed before noise.
    pub feature_noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            trajectory: TrajectorySpec::default(),
            frames: 48,
            feature_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub camera: CameraView,
    pub rgb: ImageBuf,
    pub feature: ImageBuf,
    pub labels: LabelMap,
    pub depth: ImageBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSequence {
    pub seed: u64,
    pub spec: DatasetSpec,
    pub scene: LabeledScene,
    pub frames: Vec<Frame>,
}

fn quantize_f32(img: &ImageBuf) -> ImageBuf {
    let data = img.data.iter().map(|&v| v as f32 as f64).collect();
    ImageBuf::from_vec(img.width, img.height, img.channels, data).unwrap()
}

/// Render every camera. Stored values are already at file precision
/// (8-bit rgb, f32 maps), so saving and loading reproduces them exactly.
pub fn render_dataset(
    scene: &LabeledScene,
    cameras: &[CameraView],
    feature_noise: f64,
    noise_seed: u64,
) -> Result<Vec<Frame>> {
    let frames: Vec<Result<Frame>> = cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let out = render(&scene.scene, cam, [0.0; 3])?;
            let feature = quantize_f32(&out.feature);
            let mut labels = segment_feature_map(&feature, &scene.table)?;
            for (l, a) in labels.data.iter_mut().zip(&out.alpha.data) {
                if *a == 0.0 {
                    *l = BACKGROUND;
                }
            }
            let feature = if feature_noise > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    noise_seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                );
                let mut noisy = feature.clone();
                noisy
                    .data
                    .iter_mut()
                    .for_each(|v| *v += feature_noise * normal(&mut rng));
                quantize_f32(&noisy)
            } else {
                feature
            };
            Ok(Frame {
                camera: *cam,
                rgb: io::quantize_8bit(&out.rgb),
                feature,
                labels,
                depth: quantize_f32(&out.depth),
            })
        })
        .collect();
    frames.into_iter().collect()
}

pub fn generate_dataset(seed: u64, spec: &DatasetSpec) -> Result<DatasetSequence> {
    let scene = generate_scene(seed, &spec.scene)?;
    let cameras = generate_trajectory(seed, spec.frames, &spec.trajectory, Vector3::zeros())?;
    let frames = render_dataset(&scene, &cameras, spec.feature_noise, seed)?;
    Ok(DatasetSequence {
        seed,
        spec: *spec,
        scene,
        frames,
    })
}

/// `count` sequences with seeds `seed, seed + 1, …`.
pub fn generate_family(
    seed: u64,
    count: usize,
    spec: &DatasetSpec,
) -> Result<Vec<DatasetSequence>> {
    (0..count as u64)
        .map(|i| generate_dataset(seed + i, spec))
        .collect()
}

// --------------------------------------------------------- semantic teacher

/// Image-only semantic model: each pixel takes the embedding of the class
/// whose palette color is nearest to the pixel color.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTeacher {
    pub palette: Vec<[f64; 3]>,
    pub table: Vec<Vec<f64>>,
}

impl SemanticTeacher {
    pub fn from_scene(scene: &LabeledScene) -> Self {
        Self {
            palette: scene.palette.clone(),
            table: scene.table.clone(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.table.first().map_or(0, |r| r.len())
    }

    pub fn features(&self, img: &ImageBuf) -> Result<ImageBuf> {
        if img.channels != 3 {
            return Err(Error::Dimension(format!(
                "teacher needs an rgb image, got {} channels",
                img.channels
            )));
        }
        let n = self.feature_dim();
        let mut out = ImageBuf::new(img.width, img.height, n);
        for p in 0..img.pixels() {
            let c = &img.data[p * 3..p * 3 + 3];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, pc) in self.palette.iter().enumerate() {
                let d = (0..3).map(|i| (c[i] - pc[i]).powi(2)).sum::<f64>();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            out.data[p * n..(p + 1) * n].copy_from_slice(&self.table[best]);
        }
        Ok(out)
    }
}

// ------------------------------------------------------------ scene file

pub const SCENE_MAGIC: [u8; 4] = *b"SSSC";
pub const SCENE_VERSION: u32 = 1;

pub fn encode_scene(s: &LabeledScene) -> Vec<u8> {
    let n = s.scene.feature_dim;
    let mut w = ByteWriter::default();
    w.bytes(&SCENE_MAGIC);
    w.u32(SCENE_VERSION);
    w.u64(s.scene.len() as u64);
    w.u32(n as u32);
    w.u32(s.classes() as u32);
    for (g, &class) in s.scene.gaussians.iter().zip(&s.class_ids) {
        for v in g.mu.iter() {
            w.f64(*v);
        }
        for v in g.rot.to_array() {
            w.f64(v);
        }
        for v in g.scale.iter() {
            w.f64(*v);
        }
        w.f64(g.opacity);
        for v in g.color {
            w.f64(v);
        }
        for v in &g.feat {
            w.f64(*v);
        }
        w.u32(class as u32);
    }
    for row in &s.table {
        for v in row {
            w.f64(*v);
        }
    }
    for c in &s.palette {
        for v in c {
            w.f64(*v);
        }
    }
    w.buf
}

pub fn decode_scene(data: &[u8]) -> Result<LabeledScene> {
    let mut r = ByteReader::new(data);
    r.expect_magic(&SCENE_MAGIC, "scene")?;
    let at = r.offset();
    let version = r.u32("scene version")?;
    if version != SCENE_VERSION {
        return Err(Error::format(
            at,
            format!("unsupported scene version {version}"),
        ));
    }
    let count = r.u64("gaussian count")? as usize;
    let at = r.offset();
    let n = r.u32("feature dimension")? as usize;
    let classes = r.u32("class count")? as usize;
    if classes > MAX_CLASSES || n > 4096 {
        return Err(Error::format(
            at,
            format!("implausible header: N = {n}, C = {classes}"),
        ));
    }
    let record = 8 * (3 + 4 + 3 + 1 + 3 + n) + 4;
    let expected = count
        .checked_mul(record)
        .and_then(|v| v.checked_add(8 * (classes * n + classes * 3)));
    if expected != Some(r.remaining()) {
        return Err(Error::format(
            data.len() as u64,
            format!("header promises {count} gaussians (N = {n}, C = {classes}) but payload length differs"),
        ));
    }
    let mut gaussians = Vec::with_capacity(count);
    let mut class_ids = Vec::with_capacity(count);
    for i in 0..count {
        let start = r.offset();
        let mut f = |k: usize| -> Result<Vec<f64>> { (0..k).map(|_| r.f64("gaussian")).collect() };
        let mu = f(3)?;
        let rot = f(4)?;
        let scale = f(3)?;
        let opacity = f(1)?[0];
        let color = f(3)?;
        let feat = f(n)?;
        let class = r.u32("class id")? as usize;
        if class >= classes {
            return Err(Error::format(
                r.offset() - 4,
                format!("gaussian {i} has class {class} >= {classes}"),
            ));
        }
        let g = SemanticGaussian3D {
            mu: Vector3::new(mu[0], mu[1], mu[2]),
            rot: Quaternion::new(rot[0], rot[1], rot[2], rot[3]),
            scale: Vector3::new(scale[0], scale[1], scale[2]),
            opacity,
            color: [color[0], color[1], color[2]],
            feat,
        };
        g.validate(i, n)
            .map_err(|e| Error::format(start, e.to_string()))?;
        gaussians.push(g);
        class_ids.push(class);
    }
    let mut table = Vec::with_capacity(classes);
    for _ in 0..classes {
        table.push(
            (0..n)
                .map(|_| r.f64("embedding table"))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mut palette = Vec::with_capacity(classes);
    for _ in 0..classes {
        palette.push([r.f64("palette")?, r.f64("palette")?, r.f64("palette")?]);
    }
    r.finish("scene")?;
    Ok(LabeledScene {
        scene: GaussianScene::from_gaussians(n, gaussians),
        class_ids,
        table,
        palette,
    })
}

// --------------------------------------------------------- dataset files

fn frame_stem(dir: &Path, i: usize) -> PathBuf {
    dir.join("frames").join(format!("{i:06}"))
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    stem.with_extension(ext)
}

pub fn manifest_text(d: &DatasetSequence) -> String {
    let s = &d.spec;
    let e = s.scene.half_extent;
    let lines = [
        "format=semsplat-dataset".to_string(),
        "version=1".to_string(),
        format!("seed={}", d.seed),
        format!("frames={}", d.frames.len()),
        format!("width={}", s.trajectory.width),
        format!("height={}", s.trajectory.height),
        format!("feature_dim={}", s.scene.feature_dim),
        format!("classes={}", s.scene.classes),
        format!("scene.half_extent={:?},{:?},{:?}", e[0], e[1], e[2]),
        format!("scene.plane_grid={}", s.scene.plane_grid),
        format!("scene.objects={}", s.scene.objects),
        format!(
            "scene.gaussians_per_object={}",
            s.scene.gaussians_per_object
        ),
        format!("scene.color_jitter={:?}", s.scene.color_jitter),
        format!("scene.embedding_seed={}", s.scene.embedding_seed),
        format!("trajectory.fov_deg={:?}", s.trajectory.fov_deg),
        format!("trajectory.radius={:?}", s.trajectory.radius),
        format!("trajectory.deg_per_frame={:?}", s.trajectory.deg_per_frame),
        format!("feature_noise={:?}", s.feature_noise),
    ];
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

fn parse_manifest(text: &str) -> Result<(u64, DatasetSpec)> {
    let kv = io::parse_key_values(text)?;
    let get = |key: &str| -> Result<&str> {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(0, format!("manifest is missing `{key}`")))
    };
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::format(0, format!("manifest value {key}={v} is invalid")))
    }
    if get("format")? != "semsplat-dataset" || get("version")? != "1" {
        return Err(Error::format(0, "unsupported dataset manifest"));
    }
    let ext: Vec<f64> = get("scene.half_extent")?
        .split(',')
        .map(|v| num("scene.half_extent", v))
        .collect::<Result<_>>()?;
    if ext.len() != 3 {
        return Err(Error::format(0, "scene.half_extent needs 3 values"));
    }
    let spec = DatasetSpec {
        scene: SceneSpec {
            half_extent: [ext[0], ext[1], ext[2]],
            plane_grid: num("scene.plane_grid", get("scene.plane_grid")?)?,
            objects: num("scene.objects", get("scene.objects")?)?,
            gaussians_per_object: num(
                "scene.gaussians_per_object",
                get("scene.gaussians_per_object")?,
            )?,
            classes: num("classes", get("classes")?)?,
            feature_dim: num("feature_dim", get("feature_dim")?)?,
            color_jitter: num("scene.color_jitter", get("scene.color_jitter")?)?,
            embedding_seed: num("scene.embedding_seed", get("scene.embedding_seed")?)?,
        },
        trajectory: TrajectorySpec {
            width: num("width", get("width")?)?,
            height: num("height", get("height")?)?,
            fov_deg: num("trajectory.fov_deg", get("trajectory.fov_deg")?)?,
            radius: num("trajectory.radius", get("trajectory.radius")?)?,
            deg_per_frame: num("trajectory.deg_per_frame", get("trajectory.deg_per_frame")?)?,
        },
        frames: num("frames", get("frames")?)?,
        feature_noise: num("feature_noise", get("feature_noise")?)?,
    };
    Ok((num("seed", get("seed")?)?, spec))
}

/// Write `scene.bin`, `manifest.txt` and `frames/NNNNNN.{ppm,feat,label,depth,cam}`.
pub fn save_dataset(dir: &Path, d: &DatasetSequence) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    fs::write(dir.join("scene.bin"), encode_scene(&d.scene))?;
    fs::write(dir.join("manifest.txt"), manifest_text(d))?;
    for (i, f) in d.frames.iter().enumerate() {
        let stem = frame_stem(dir, i);
        io::write_ppm(&with_ext(&stem, "ppm"), &f.rgb)?;
        io::write_map(&with_ext(&stem, "feat"), &f.feature)?;
        io::write_map(&with_ext(&stem, "label"), &io::labels_to_map(&f.labels))?;
        io::write_map(&with_ext(&stem, "depth"), &f.depth)?;
        io::write_camera(&with_ext(&stem, "cam"), &f.camera)?;
    }
    Ok(())
}

/// Attach the file name to format errors raised while reading `path`.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSequence> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)?;
    let (seed, spec) = in_file(&manifest_path, parse_manifest(&text))?;
    let scene_path = dir.join("scene.bin");
    let scene = in_file(&scene_path, decode_scene(&fs::read(&scene_path)?))?;
    if scene.scene.feature_dim != spec.scene.feature_dim || scene.classes() != spec.scene.classes {
        return Err(Error::format(
            0,
            "scene.bin dimensions disagree with the manifest",
        ));
    }
    let (w, h, n) = (
        spec.trajectory.width,
        spec.trajectory.height,
        spec.scene.feature_dim,
    );
    let mut frames = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let stem = frame_stem(dir, i);
        let p = with_ext(&stem, "ppm");
        let rgb = in_file(&p, io::read_ppm(&p))?;
        let p = with_ext(&stem, "feat");
        let feature = in_file(&p, io::read_map(&p))?;
        let p = with_ext(&stem, "label");
        let labels = in_file(&p, io::read_map(&p).and_then(|m| io::map_to_labels(&m)))?;
        let p = with_ext(&stem, "depth");
        let depth = in_file(&p, io::read_map(&p))?;
        let p = with_ext(&stem, "cam");
        let camera = in_file(&p, io::read_camera(&p))?;
        let ok = rgb.width == w
            && rgb.height == h
            && feature.width == w
            && feature.height == h
            && feature.channels == n
            && labels.width == w
            && labels.height == h
            && depth.width == w
            && depth.height == h
            && depth.channels == 1
            && camera.width == w
            && camera.height == h;
        if !ok {
            return Err(Error::format(
                0,
                format!("frame {i}: file dimensions disagree with the manifest"),
            ));
        }
        frames.push(Frame {
            camera,
            rgb,
            feature,
            labels,
            depth,
        });
    }
    Ok(DatasetSequence {
        seed,
        spec,
        scene,
        frames,
    })
}

/// Save a family as `dir/seq_000`, `dir/seq_001`, ….
pub fn save_family(dir: &Path, family: &[DatasetSequence]) -> Result<()> {
    for (i, d) in family.iter().enumerate() {
        save_dataset(&dir.join(format!("seq_{i:03}")), d)?;
    }
    Ok(())
}

/// Load a single dataset directory, or every `seq_*` subdirectory in name order.
pub fn load_family(dir: &Path) -> Result<Vec<DatasetSequence>> {
    if dir.join("manifest.txt").exists() {
        return Ok(vec![load_dataset(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::config(format!(
            "{} contains no dataset",
            dir.display()
        )));
    }
    subdirs.iter().map(|p| load_dataset(p)).collect()
}
