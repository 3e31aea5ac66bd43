use rayon::prelude::*;

use super::{
    check_inputs, eval_fragment, project_scene, tile_bin, ForwardState, GaussianScene,
    RenderOutput, RenderSettings,
};
use crate::error::Result;
use crate::geometry::CameraView;
use crate::image::ImageBuf;

/// Render with default settings.
pub fn render(
    scene: &GaussianScene,
    cam: &CameraView,
    background: [f64; 3],
) -> Result<RenderOutput> {
    render_with(&RenderSettings::default(), scene, cam, background).map(|(out, _)| out)
}

/// Render and keep the state needed by [`super::render_backward`].
pub fn render_with(
    settings: &RenderSettings,
    scene: &GaussianScene,
    cam: &CameraView,
    background: [f64; 3],
) -> Result<(RenderOutput, ForwardState)> {
    check_inputs(scene, cam, &background)?;
    let splats = project_scene(scene, cam, settings)?;
    let bins = tile_bin(&splats, cam.width, cam.height, settings.tile_size);
    let n = scene.feature_dim;
    let (w, h) = (cam.width, cam.height);

    let tiles: Vec<TileBuffers> = (0..bins.len())
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = bins.tile_pixels(t, w, h);
            let mut buf = TileBuffers::new((x1 - x0) * (y1 - y0), n);
            let list = &bins.lists[t];
            let mut p = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut transmittance = 1.0;
                    let mut rgb = [0.0; 3];
                    let feat = &mut buf.feature[p * n..(p + 1) * n];
                    let mut depth_sum = 0.0;
                    for &gi in list {
                        let s = splats[gi as usize].as_ref().unwrap();
                        let Some(frag) = eval_fragment(s, px, py, settings) else {
                            continue;
                        };
                        let g = &scene.gaussians[gi as usize];
                        let weight = frag.alpha * transmittance;
                        for c in 0..3 {
                            rgb[c] += weight * g.color[c];
                        }
                        for (f, gf) in feat.iter_mut().zip(&g.feat) {
                            *f += weight * gf;
                        }
                        depth_sum += weight * s.depth;
                        transmittance *= 1.0 - frag.alpha;
                        if transmittance < settings.min_transmittance {
                            break;
                        }
                    }
                    let alpha = 1.0 - transmittance;
                    for c in 0..3 {
                        buf.rgb[p * 3 + c] = rgb[c] + transmittance * background[c];
                    }
                    buf.alpha[p] = alpha;
                    buf.depth[p] = if alpha > 0.0 { depth_sum / alpha } else { 0.0 };
                    p += 1;
                }
            }
            buf
        })
        .collect();

    let mut out = RenderOutput {
        rgb: ImageBuf::new(w, h, 3),
        feature: ImageBuf::new(w, h, n),
        alpha: ImageBuf::new(w, h, 1),
        depth: ImageBuf::new(w, h, 1),
    };
    for (t, buf) in tiles.iter().enumerate() {
        let (x0, y0, x1, y1) = bins.tile_pixels(t, w, h);
        let mut p = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                out.rgb
                    .pixel_mut(x, y)
                    .copy_from_slice(&buf.rgb[p * 3..p * 3 + 3]);
                out.feature
                    .pixel_mut(x, y)
                    .copy_from_slice(&buf.feature[p * n..(p + 1) * n]);
                out.alpha.pixel_mut(x, y)[0] = buf.alpha[p];
                out.depth.pixel_mut(x, y)[0] = buf.depth[p];
                p += 1;
            }
        }
    }

    let state = ForwardState {
        settings: *settings,
        camera: *cam,
        background,
        fingerprint: scene.fingerprint(),
        len: scene.len(),
        feature_dim: n,
        splats,
        bins,
    };
    Ok((out, state))
}

struct TileBuffers {
    rgb: Vec<f64>,
    feature: Vec<f64>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
}

impl TileBuffers {
    fn new(pixels: usize, n: usize) -> Self {
        Self {
            rgb: vec![0.0; pixels * 3],
            feature: vec![0.0; pixels * n],
            alpha: vec![0.0; pixels],
            depth: vec![0.0; pixels],
        }
    }
}
