use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::{
    conic_of, eval_fragment, ForwardState, GaussianScene, RenderGradients, RenderUpstream,
};
use crate::error::{Error, Result};
use crate::geometry::{
    clamped_ratios, normalize_backward, project_with, rotation_matrix, rotation_matrix_partials,
    CameraView,
};

// Per-gaussian screen-space gradient layout inside tile buffers.
const MEAN: usize = 0;
const CONIC: usize = 2;
const OPACITY: usize = 5;
const COLOR: usize = 6;
const DEPTH: usize = 9;
const FEAT: usize = 10;

/// Gradients of a scalar loss with respect to every gaussian parameter.
///
/// `state` must come from `render_with` on the same scene, camera and background.
/// Camera parameters receive no gradient.
pub fn render_backward(
    state: &ForwardState,
    scene: &GaussianScene,
    cam: &CameraView,
    upstream: &RenderUpstream,
) -> Result<RenderGradients> {
    if state.len != scene.len()
        || state.feature_dim != scene.feature_dim
        || state.fingerprint != scene.fingerprint()
    {
        return Err(Error::ContractViolation(
            "scene differs from the forward pass".into(),
        ));
    }
    if state.camera != *cam {
        return Err(Error::ContractViolation(
            "camera differs from the forward pass".into(),
        ));
    }
    let (w, h, n) = (cam.width, cam.height, scene.feature_dim);
    let shapes_ok = [
        (&upstream.rgb, 3),
        (&upstream.feature, n),
        (&upstream.alpha, 1),
        (&upstream.depth, 1),
    ]
    .iter()
    .all(|(img, c)| img.width == w && img.height == h && img.channels == *c);
    if !shapes_ok {
        return Err(Error::Dimension(
            "upstream gradient shapes do not match the render".into(),
        ));
    }
    if !upstream.is_finite() {
        return Err(Error::Numeric("non-finite upstream gradient".into()));
    }

    let stride = FEAT + n;
    let bins = &state.bins;
    let settings = &state.settings;
    let bg = state.background;

    // Screen-space gradients per tile, indexed by position in the tile list.
    let tile_grads: Vec<Vec<f64>> = (0..bins.len())
        .into_par_iter()
        .map(|t| {
            let list = &bins.lists[t];
            let mut acc = vec![0.0; list.len() * stride];
            if list.is_empty() {
                return acc;
            }
            let (x0, y0, x1, y1) = bins.tile_pixels(t, w, h);
            let mut frags: Vec<(usize, super::Fragment, f64)> = Vec::with_capacity(list.len());
            let mut r_feat = vec![0.0; n];
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    frags.clear();
                    let mut tr = 1.0;
                    let mut depth_sum = 0.0;
                    for (pos, &gi) in list.iter().enumerate() {
                        let s = state.splats[gi as usize].as_ref().unwrap();
                        let Some(f) = eval_fragment(s, px, py, settings) else {
                            continue;
                        };
                        frags.push((pos, f, tr));
                        depth_sum += f.alpha * tr * s.depth;
                        tr *= 1.0 - f.alpha;
                        if tr < settings.min_transmittance {
                            break;
                        }
                    }
                    if frags.is_empty() {
                        continue;
                    }
                    let alpha = 1.0 - tr;
                    let g_rgb = upstream.rgb.pixel(x, y);
                    let g_feat = upstream.feature.pixel(x, y);
                    let g_alpha = upstream.alpha.pixel(x, y)[0];
                    let g_depth = upstream.depth.pixel(x, y)[0];
                    // depth = depth_sum / alpha
                    let (g_depth_sum, g_alpha_total) = if alpha > 0.0 {
                        let d = depth_sum / alpha;
                        (g_depth / alpha, g_alpha - g_depth * d / alpha)
                    } else {
                        (0.0, g_alpha)
                    };

                    // Suffix quantities normalized by the transmittance after fragment i.
                    let mut r_rgb = bg;
                    r_feat.iter_mut().for_each(|v| *v = 0.0);
                    let mut r_depth = 0.0;
                    let mut tail = 1.0;
                    for &(pos, f, t_before) in frags.iter().rev() {
                        let gi = list[pos] as usize;
                        let s = state.splats[gi].as_ref().unwrap();
                        let g = &scene.gaussians[gi];
                        let a = f.alpha;
                        let weight = a * t_before;
                        let row = &mut acc[pos * stride..(pos + 1) * stride];

                        let mut da = 0.0;
                        for c in 0..3 {
                            row[COLOR + c] += weight * g_rgb[c];
                            da += g_rgb[c] * (g.color[c] - r_rgb[c]);
                        }
                        for k in 0..n {
                            row[FEAT + k] += weight * g_feat[k];
                            da += g_feat[k] * (g.feat[k] - r_feat[k]);
                        }
                        row[DEPTH] += weight * g_depth_sum;
                        da += g_depth_sum * (s.depth - r_depth);
                        da *= t_before;
                        da += g_alpha_total * t_before * tail;

                        for c in 0..3 {
                            r_rgb[c] = a * g.color[c] + (1.0 - a) * r_rgb[c];
                        }
                        for k in 0..n {
                            r_feat[k] = a * g.feat[k] + (1.0 - a) * r_feat[k];
                        }
                        r_depth = a * s.depth + (1.0 - a) * r_depth;
                        tail *= 1.0 - a;

                        // alpha = opacity · exp(-q/2)
                        row[OPACITY] += da * f.falloff;
                        let dq = -0.5 * da * s.opacity * f.falloff;
                        let [ca, cb, cc] = s.conic;
                        // d = pixel - mean, so ∂q/∂mean = -∂q/∂d.
                        row[MEAN] -= dq * 2.0 * (ca * f.dx + cb * f.dy);
                        row[MEAN + 1] -= dq * 2.0 * (cb * f.dx + cc * f.dy);
                        row[CONIC] += dq * f.dx * f.dx;
                        row[CONIC + 1] += dq * 2.0 * f.dx * f.dy;
                        row[CONIC + 2] += dq * f.dy * f.dy;
                    }
                }
            }
            acc
        })
        .collect();

    // Fixed-order reduction over tiles.
    let mut screen = vec![0.0; scene.len() * stride];
    for (t, acc) in tile_grads.iter().enumerate() {
        for (pos, &gi) in bins.lists[t].iter().enumerate() {
            let dst = &mut screen[gi as usize * stride..(gi as usize + 1) * stride];
            for (d, s) in dst.iter_mut().zip(&acc[pos * stride..(pos + 1) * stride]) {
                *d += s;
            }
        }
    }

    let per_gaussian: Vec<GaussianGrad> = (0..scene.len())
        .into_par_iter()
        .map(|i| {
            if state.splats[i].is_none() {
                return GaussianGrad::zero();
            }
            let row = &screen[i * stride..(i + 1) * stride];
            projection_backward(&scene.gaussians[i], cam, row)
        })
        .collect();

    let mut grads = RenderGradients::zeros(scene.len(), n);
    for (i, g) in per_gaussian.into_iter().enumerate() {
        grads.mu[i] = g.mu;
        grads.rot[i] = g.rot;
        grads.scale[i] = g.scale;
        if state.splats[i].is_some() {
            let row = &screen[i * stride..(i + 1) * stride];
            grads.opacity[i] = row[OPACITY];
            grads.color[i] = [row[COLOR], row[COLOR + 1], row[COLOR + 2]];
            grads.feat[i * n..(i + 1) * n].copy_from_slice(&row[FEAT..FEAT + n]);
        }
    }
    Ok(grads)
}

struct GaussianGrad {
    mu: [f64; 3],
    rot: [f64; 4],
    scale: [f64; 3],
}

impl GaussianGrad {
    fn zero() -> Self {
        Self {
            mu: [0.0; 3],
            rot: [0.0; 4],
            scale: [0.0; 3],
        }
    }
}

/// Chain screen-space gradients (mean, conic, depth) back to position, rotation and scale.
fn projection_backward(
    g: &crate::geometry::SemanticGaussian3D,
    cam: &CameraView,
    row: &[f64],
) -> GaussianGrad {
    let raw = g.rot.to_array();
    let unit = g.rot.scale(1.0 / g.rot.norm());
    let r = rotation_matrix(&unit);
    let m = r * Matrix3::from_diagonal(&g.scale);
    let cov3d = m * m.transpose();
    let w = cam.world_to_camera_rotation();
    let t = w * (g.mu - cam.pose.translation);
    let p = project_with(t, cov3d, &w, cam).expect("visible splat must project");

    // conic = inverse(cov2d), cov2d = [[A, B], [B, C]]
    let (a, b, c) = (p.cov2d[(0, 0)], p.cov2d[(0, 1)], p.cov2d[(1, 1)]);
    let (_, det) = conic_of(&p.cov2d);
    let det2 = det * det;
    let (gca, gcb, gcc) = (row[CONIC], row[CONIC + 1], row[CONIC + 2]);
    let g_a = gca * (-c * c / det2) + gcb * (b * c / det2) + gcc * (-b * b / det2);
    let g_b = gca * (2.0 * b * c / det2)
        + gcb * (-(det + 2.0 * b * b) / det2)
        + gcc * (2.0 * a * b / det2);
    let g_c = gca * (-b * b / det2) + gcb * (a * b / det2) + gcc * (-a * a / det2);
    let g2 = Matrix2::new(g_a, 0.5 * g_b, 0.5 * g_b, g_c);

    let tm = p.jacobian * w;
    let g_cov3d = tm.transpose() * g2 * tm;
    let g_tm = 2.0 * g2 * tm * cov3d;
    let g_j = g_tm * w.transpose();

    // J = [[fx/z, 0, -fx·rx/z], [0, fy/z, -fy·ry/z]] with rx, ry the
    // (possibly clamped) ratios x/z, y/z.
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (rx, ry, clamped) = clamped_ratios(&t, cam);
    let mut g_t = Vector3::zeros();
    g_t.z += g_j[(0, 0)] * (-fx * iz2) + g_j[(1, 1)] * (-fy * iz2);
    g_t.z += g_j[(0, 2)] * (fx * rx * iz2) + g_j[(1, 2)] * (fy * ry * iz2);
    if !clamped[0] {
        g_t.x += g_j[(0, 2)] * (-fx * iz2);
        g_t.z += g_j[(0, 2)] * (fx * t.x * iz3);
    }
    if !clamped[1] {
        g_t.y += g_j[(1, 2)] * (-fy * iz2);
        g_t.z += g_j[(1, 2)] * (fy * t.y * iz3);
    }
    let (gmx, gmy) = (row[MEAN], row[MEAN + 1]);
    g_t.x += gmx * fx * iz;
    g_t.y += gmy * fy * iz;
    g_t.z += -gmx * fx * t.x * iz2 - gmy * fy * t.y * iz2;
    g_t.z += row[DEPTH];
    let g_mu = w.transpose() * g_t;

    // cov3d = M Mᵀ, M = R diag(s)
    let g_m = 2.0 * g_cov3d * m;
    let mut g_scale = [0.0; 3];
    let mut g_r = Matrix3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            g_scale[k] += g_m[(i, k)] * r[(i, k)];
            g_r[(i, k)] = g_m[(i, k)] * g.scale[k];
        }
    }
    let partials = rotation_matrix_partials(&unit);
    let g_unit = [0, 1, 2, 3].map(|j| g_r.component_mul(&partials[j]).sum());
    let g_rot = normalize_backward(&raw, &g_unit);

    GaussianGrad {
        mu: [g_mu.x, g_mu.y, g_mu.z],
        rot: g_rot,
        scale: g_scale,
    }
}
