//! Brute-force renderer: no tiles, no footprint rectangles, every gaussian
//! evaluated at every pixel. Serves as the oracle for the tiled path.

use nalgebra::Vector2;

use super::{check_inputs, GaussianScene, RenderOutput, RenderSettings};
use crate::error::Result;
use crate::geometry::{project_gaussian, CameraView};
use crate::image::ImageBuf;

pub fn render_reference(
    scene: &GaussianScene,
    cam: &CameraView,
    background: [f64; 3],
) -> Result<RenderOutput> {
    render_reference_with(&RenderSettings::default(), scene, cam, background)
}

pub fn render_reference_with(
    settings: &RenderSettings,
    scene: &GaussianScene,
    cam: &CameraView,
    background: [f64; 3],
) -> Result<RenderOutput> {
    check_inputs(scene, cam, &background)?;
    let n = scene.feature_dim;

    let mut visible = Vec::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        if let Some(p) = project_gaussian(g, cam)? {
            if let Some(inv) = p.cov2d.try_inverse() {
                visible.push((i, p.depth, Vector2::new(p.mean2d[0], p.mean2d[1]), inv));
            }
        }
    }
    visible.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let (w, h) = (cam.width, cam.height);
    let mut rgb = ImageBuf::new(w, h, 3);
    let mut feature = ImageBuf::new(w, h, n);
    let mut alpha_map = ImageBuf::new(w, h, 1);
    let mut depth_map = ImageBuf::new(w, h, 1);
    let k2 = settings.sigma_extent * settings.sigma_extent;

    for y in 0..h {
        for x in 0..w {
            let pix = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut color = [0.0; 3];
            let mut feat = vec![0.0; n];
            let mut depth = 0.0;
            for (i, z, mean, inv) in &visible {
                let d = pix - mean;
                let q = inv[(0, 0)] * d.x * d.x
                    + 2.0 * inv[(0, 1)] * d.x * d.y
                    + inv[(1, 1)] * d.y * d.y;
                if q > k2 {
                    continue;
                }
                let g = &scene.gaussians[*i];
                let a = g.opacity * (-0.5 * q).exp();
                if a < settings.min_alpha {
                    continue;
                }
                let wgt = a * t;
                for c in 0..3 {
                    color[c] += wgt * g.color[c];
                }
                for (f, v) in feat.iter_mut().zip(&g.feat) {
                    *f += wgt * v;
                }
                depth += wgt * z;
                t *= 1.0 - a;
                if t < settings.min_transmittance {
                    break;
                }
            }
            for c in 0..3 {
                rgb.pixel_mut(x, y)[c] = color[c] + t * background[c];
            }
            feature.pixel_mut(x, y).copy_from_slice(&feat);
            let alpha = 1.0 - t;
            alpha_map.pixel_mut(x, y)[0] = alpha;
            depth_map.pixel_mut(x, y)[0] = if alpha > 0.0 { depth / alpha } else { 0.0 };
        }
    }
    Ok(RenderOutput {
        rgb,
        feature,
        alpha: alpha_map,
        depth: depth_map,
    })
}
