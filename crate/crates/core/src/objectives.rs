//! Training losses and their gradients: windowed SSIM, the photometric mix
//! of SSIM and pixel distance, the pose regression loss, cosine semantic
//! distillation, and the weighted total.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Quaternion, RelativePose};
use crate::image::ImageBuf;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Norm floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub eta: f64,
    pub lambda_pose: f64,
    pub lambda_sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta: 0.15,
            lambda_pose: 0.1,
            lambda_sem: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=1.0).contains(&self.eta) {
            bad.push(format!("eta = {} is outside [0, 1]", self.eta));
        }
        if !(self.lambda_pose >= 0.0 && self.lambda_pose.is_finite()) {
            bad.push(format!(
                "lambda_pose = {} must be a finite value >= 0",
                self.lambda_pose
            ));
        }
        if !(self.lambda_sem >= 0.0 && self.lambda_sem.is_finite()) {
            bad.push(format!(
                "lambda_sem = {} must be a finite value >= 0",
                self.lambda_sem
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Pixel-distance term of the photometric loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PhotometricDistance {
    /// Root of the mean squared difference over pixels and channels.
    #[default]
    Rms,
    /// Mean squared difference.
    Mse,
}

/// Per-term loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub photo: f64,
    pub pose: f64,
    pub sem: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(photo: f64, pose: f64, sem: f64, weights: &LossWeights) -> Self {
        Self {
            photo,
            pose,
            sem,
            total: total_loss(photo, pose, sem, weights),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.photo.is_finite()
            && self.pose.is_finite()
            && self.sem.is_finite()
            && self.total.is_finite()
    }
}

pub fn total_loss(photo: f64, pose: f64, sem: f64, weights: &LossWeights) -> f64 {
    photo + weights.lambda_pose * pose + weights.lambda_sem * sem
}

// ---------------------------------------------------------------- SSIM

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" window filter: output is (h-10)×(w-10).
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let row = &plane[y * w + x..y * w + x + SSIM_WINDOW];
            horiz[y * ow + x] = row.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kj) in k.iter().enumerate() {
                s += kj * horiz[(y + j) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Transpose of [`filter_valid`]: scatters an (h-10)×(w-10) map back to h×w.
fn filter_adjoint(map: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut vert = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for (j, kj) in k.iter().enumerate() {
                vert[(y + j) * ow + x] += kj * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = vert[y * ow + x];
            for (i, ki) in k.iter().enumerate() {
                out[y * w + x + i] += ki * v;
            }
        }
    }
    out
}

fn check_ssim_inputs(a: &ImageBuf, b: &ImageBuf) -> Result<()> {
    a.ensure_same_shape(b, "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {}×{}",
            a.width, a.height
        )));
    }
    Ok(())
}

/// Mean SSIM over all valid window positions and channels.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    ssim_impl(a, b, false).map(|(s, _)| s)
}

/// SSIM(x, y) and its gradient with respect to `y`.
pub fn ssim_with_grad(x: &ImageBuf, y: &ImageBuf) -> Result<(f64, ImageBuf)> {
    ssim_impl(x, y, true).map(|(s, g)| (s, g.unwrap()))
}

fn ssim_impl(x: &ImageBuf, y: &ImageBuf, want_grad: bool) -> Result<(f64, Option<ImageBuf>)> {
    check_ssim_inputs(x, y)?;
    let (h, w, ch) = (x.height, x.width, x.channels);
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let positions = (h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW);
    let norm = 1.0 / (positions * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| ImageBuf::new(w, h, ch));

    for c in 0..ch {
        let xp = x.channel(c).data;
        let yp = y.channel(c).data;
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
        let mx = filter_valid(&xp, h, w, &k);
        let my = filter_valid(&yp, h, w, &k);
        let exx = filter_valid(&sq(&xp, &xp), h, w, &k);
        let eyy = filter_valid(&sq(&yp, &yp), h, w, &k);
        let exy = filter_valid(&sq(&xp, &yp), h, w, &k);

        let mut g_mu = vec![0.0; positions];
        let mut g_eyy = vec![0.0; positions];
        let mut g_exy = vec![0.0; positions];
        for p in 0..positions {
            let (ux, uy) = (mx[p], my[p]);
            let vx = exx[p] - ux * ux;
            let vy = eyy[p] - uy * uy;
            let cxy = exy[p] - ux * uy;
            let n1 = 2.0 * ux * uy + c1;
            let n2 = 2.0 * cxy + c2;
            let d1 = ux * ux + uy * uy + c1;
            let d2 = vx + vy + c2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_duy = 2.0 * ux * n2 / (d1 * d2) - s * 2.0 * uy / d1;
                let ds_dvy = -s / d2;
                let ds_dcxy = 2.0 * n1 / (d1 * d2);
                g_mu[p] = (ds_duy - 2.0 * uy * ds_dvy - ux * ds_dcxy) * norm;
                g_eyy[p] = ds_dvy * norm;
                g_exy[p] = ds_dcxy * norm;
            }
        }
        if let Some(g) = grad.as_mut() {
            let a = filter_adjoint(&g_mu, h, w, &k);
            let b = filter_adjoint(&g_eyy, h, w, &k);
            let e = filter_adjoint(&g_exy, h, w, &k);
            for i in 0..h * w {
                g.data[i * ch + c] = a[i] + 2.0 * yp[i] * b[i] + xp[i] * e[i];
            }
        }
    }
    Ok((total * norm, grad))
}

// ---------------------------------------------------------- photometric

pub fn photometric_loss(gt: &ImageBuf, rendered: &ImageBuf, eta: f64) -> Result<f64> {
    photometric_loss_with(gt, rendered, eta, PhotometricDistance::Rms)
}

pub fn photometric_loss_with(
    gt: &ImageBuf,
    rendered: &ImageBuf,
    eta: f64,
    distance: PhotometricDistance,
) -> Result<f64> {
    gt.ensure_same_shape(rendered, "photometric loss")?;
    let d = pixel_distance(gt, rendered, distance);
    if eta == 0.0 {
        return Ok(d);
    }
    let s = ssim(gt, rendered)?;
    Ok(eta * (1.0 - s) / 2.0 + (1.0 - eta) * d)
}

/// Photometric loss and its gradient with respect to `rendered`.
pub fn photometric_loss_with_grad(
    gt: &ImageBuf,
    rendered: &ImageBuf,
    eta: f64,
    distance: PhotometricDistance,
) -> Result<(f64, ImageBuf)> {
    gt.ensure_same_shape(rendered, "photometric loss")?;
    let n = gt.data.len() as f64;
    let d = pixel_distance(gt, rendered, distance);
    let scale = match distance {
        PhotometricDistance::Rms if d > 0.0 => 1.0 / (n * d),
        PhotometricDistance::Rms => 0.0,
        PhotometricDistance::Mse => 2.0 / n,
    };
    let mut grad = ImageBuf::new(gt.width, gt.height, gt.channels);
    for ((g, r), t) in grad.data.iter_mut().zip(&rendered.data).zip(&gt.data) {
        *g = (1.0 - eta) * scale * (r - t);
    }
    if eta == 0.0 {
        return Ok((d, grad));
    }
    let (s, gs) = ssim_with_grad(gt, rendered)?;
    for (g, v) in grad.data.iter_mut().zip(&gs.data) {
        *g -= 0.5 * eta * v;
    }
    Ok((eta * (1.0 - s) / 2.0 + (1.0 - eta) * d, grad))
}

fn pixel_distance(a: &ImageBuf, b: &ImageBuf, distance: PhotometricDistance) -> f64 {
    if a.data.is_empty() {
        return 0.0;
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    match distance {
        PhotometricDistance::Rms => mse.sqrt(),
        PhotometricDistance::Mse => mse,
    }
}

// ---------------------------------------------------------------- pose

/// Pose loss value with gradients for the predicted translation and the
/// (canonical) predicted quaternion components `[w, x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseLossEval {
    pub value: f64,
    pub grad_translation: Vector3<f64>,
    pub grad_rotation: [f64; 4],
    /// The prediction was not canonical and was canonicalized before comparison.
    pub canonicalized: bool,
}

pub fn pose_loss(pred: &RelativePose, gt: &RelativePose) -> Result<f64> {
    pose_loss_with_grad(&pred.translation, &pred.rotation, gt).map(|e| e.value)
}

/// `‖x̂ − x‖ + ‖q̂ − canon(q)‖`. A prediction that is not a canonical unit
/// quaternion is canonicalized first and the event is logged and flagged.
pub fn pose_loss_with_grad(
    pred_t: &Vector3<f64>,
    pred_q: &Quaternion,
    gt: &RelativePose,
) -> Result<PoseLossEval> {
    let gt_q = gt.rotation.canonicalize()?;
    let canonical = pred_q.canonicalize()?;
    let canonicalized = !pred_q.is_unit() || pred_q.to_array() != canonical.to_array();
    if canonicalized {
        log::warn!(
            "pose loss: predicted quaternion {:?} was not canonical",
            pred_q.to_array()
        );
    }
    let dt = pred_t - gt.translation;
    let t_norm = dt.norm();
    let qa = canonical.to_array();
    let qb = gt_q.to_array();
    let dq: [f64; 4] = [0, 1, 2, 3].map(|i| qa[i] - qb[i]);
    let q_norm = dq.iter().map(|v| v * v).sum::<f64>().sqrt();
    let grad_translation = if t_norm > 0.0 {
        dt / t_norm
    } else {
        Vector3::zeros()
    };
    let grad_rotation = if q_norm > 0.0 {
        dq.map(|v| v / q_norm)
    } else {
        [0.0; 4]
    };
    Ok(PoseLossEval {
        value: t_norm + q_norm,
        grad_translation,
        grad_rotation,
        canonicalized,
    })
}

// ------------------------------------------------------------ semantic

/// Mean over pixels of `1 − cos(pred, target)`; pixels with a near-zero
/// target are excluded.
pub fn semantic_loss(pred: &ImageBuf, target: &ImageBuf) -> Result<f64> {
    semantic_impl(pred, target, false).map(|(v, _)| v)
}

/// Semantic loss and its gradient with respect to `pred`.
pub fn semantic_loss_with_grad(pred: &ImageBuf, target: &ImageBuf) -> Result<(f64, ImageBuf)> {
    semantic_impl(pred, target, true).map(|(v, g)| (v, g.unwrap()))
}

fn semantic_impl(
    pred: &ImageBuf,
    target: &ImageBuf,
    want_grad: bool,
) -> Result<(f64, Option<ImageBuf>)> {
    pred.ensure_same_shape(target, "semantic loss")?;
    let n = pred.channels;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let valid: Vec<bool> = target
        .data
        .chunks(n.max(1))
        .map(|t| n > 0 && norm(t) >= COSINE_EPS)
        .collect();
    let count = valid.iter().filter(|&&v| v).count();
    let mut grad = want_grad.then(|| ImageBuf::new(pred.width, pred.height, n));
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv_count = 1.0 / count as f64;
    let mut sum = 0.0;
    for p in 0..pred.pixels() {
        if !valid[p] {
            continue;
        }
        let a = &pred.data[p * n..(p + 1) * n];
        let b = &target.data[p * n..(p + 1) * n];
        let na = norm(a);
        let nb = norm(b);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let da = na.max(COSINE_EPS);
        let cos = dot / (da * nb);
        sum += 1.0 - cos;
        if let Some(g) = grad.as_mut() {
            let out = &mut g.data[p * n..(p + 1) * n];
            for k in 0..n {
                let mut dcos = b[k] / (da * nb);
                if na > COSINE_EPS {
                    dcos -= cos * a[k] / (na * na);
                }
                out[k] = -dcos * inv_count;
            }
        }
    }
    Ok((sum * inv_count, grad))
}
