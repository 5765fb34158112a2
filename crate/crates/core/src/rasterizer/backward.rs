//! Reverse-mode pass of the rasterizer.
//!
//! Every pixel is replayed with the same compositor as the forward pass,
//! then walked back to front. Per-tile gradient buffers are private and are
//! merged in tile order, so results do not depend on the worker count.

use rayon::prelude::*;

use super::project::{project_backward, CameraView, ParamGrad};
use super::{
    composite_tile, Contribution, ProjectedGaussian, RenderOutput, RenderSettings, SplatGrad,
    TileBins,
};
use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianCloud};

/// Upstream gradients with respect to the four render maps.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub confidence: Vec<f64>,
    pub normal: Vec<[f64; 3]>,
}

impl RenderGradients {
    pub fn zeros(num_pixels: usize) -> Self {
        Self {
            color: vec![[0.0; 3]; num_pixels],
            depth: vec![0.0; num_pixels],
            confidence: vec![0.0; num_pixels],
            normal: vec![[0.0; 3]; num_pixels],
        }
    }

    fn check(&self, num_pixels: usize) -> Result<()> {
        for len in [
            self.color.len(),
            self.depth.len(),
            self.confidence.len(),
            self.normal.len(),
        ] {
            if len != num_pixels {
                return Err(Error::LengthMismatch {
                    left: len,
                    right: num_pixels,
                });
            }
        }
        Ok(())
    }
}

/// Gradients with respect to a cloud's raw parameters, same layout as
/// [`GaussianCloud`].
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradients {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    /// Gradient with respect to each Gaussian's pixel-space mean.
    pub screen: Vec<[f64; 2]>,
}

impl CloudGradients {
    pub fn zeros(n: usize, sh_stride: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh_coeffs: vec![0.0; n * sh_stride],
            screen: vec![[0.0; 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

struct PixelUpstream {
    color: [f64; 3],
    depth_sum: f64,
    weight: f64,
    normal_sum: [f64; 3],
}

fn pixel_upstream(
    acc: &super::PixelAccum,
    up: &RenderGradients,
    idx: usize,
    settings: &RenderSettings,
) -> PixelUpstream {
    let conf = acc.confidence();
    let mut depth_sum = 0.0;
    let mut weight = up.confidence[idx];
    if conf > settings.depth_eps && acc.count > 0 {
        let g = up.depth[idx];
        depth_sum = g / conf;
        weight -= g * (acc.depth_sum / conf) / conf;
    }
    let mut normal_sum = [0.0; 3];
    let n = acc.normal_sum;
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if acc.count > 0 && len > 1e-12 {
        let g = up.normal[idx];
        let unit = n.map(|v| v / len);
        let dot = unit[0] * g[0] + unit[1] * g[1] + unit[2] * g[2];
        normal_sum = std::array::from_fn(|k| (g[k] - unit[k] * dot) / len);
    }
    PixelUpstream {
        color: up.color[idx],
        depth_sum,
        weight,
        normal_sum,
    }
}

fn backprop_pixel(
    contribs: &[Contribution],
    splats: &[ProjectedGaussian],
    pu: &PixelUpstream,
    grads: &mut [SplatGrad],
) {
    let mut suffix = 0.0;
    for c in contribs.iter().rev() {
        let s = &splats[c.slot];
        let feature = pu.color[0] * s.color[0]
            + pu.color[1] * s.color[1]
            + pu.color[2] * s.color[2]
            + pu.depth_sum * s.depth
            + pu.weight
            + pu.normal_sum[0] * s.normal[0]
            + pu.normal_sum[1] * s.normal[1]
            + pu.normal_sum[2] * s.normal[2];
        let w = c.alpha * c.transmittance;
        let d_alpha = c.transmittance * feature - suffix / (1.0 - c.alpha);
        suffix += feature * w;

        let g = &mut grads[c.slot];
        for k in 0..3 {
            g.color[k] += pu.color[k] * w;
            g.normal[k] += pu.normal_sum[k] * w;
        }
        g.depth += pu.depth_sum * w;
        if !c.clamped {
            g.opacity += d_alpha * c.falloff;
            let d_power = -d_alpha * c.alpha;
            let (dx, dy) = (c.dx, c.dy);
            let [a, b, cc] = s.conic;
            g.conic[0] += d_power * 0.5 * dx * dx;
            g.conic[1] += d_power * dx * dy;
            g.conic[2] += d_power * 0.5 * dy * dy;
            g.mean[0] -= d_power * (a * dx + b * dy);
            g.mean[1] -= d_power * (b * dx + cc * dy);
        }
    }
}

/// Analytic gradients of the render maps with respect to the cloud's raw
/// parameters. `output` must come from [`super::render`] with the same
/// inputs.
pub fn render_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    output: &RenderOutput,
    upstream: &RenderGradients,
) -> Result<CloudGradients> {
    let (w, h) = (camera.width, camera.height);
    if output.projected.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            left: output.projected.len(),
            right: cloud.len(),
        });
    }
    if output.width != w || output.height != h {
        return Err(Error::Shape(format!(
            "render output is {}x{}, camera is {}x{}",
            output.width, output.height, w, h
        )));
    }
    upstream.check(w * h)?;

    let bins = TileBins::build(&output.projected, w, h, settings.tile_size);
    let projected = &output.projected;
    let tile_grads: Vec<Vec<SplatGrad>> = (0..bins.num_tiles())
        .into_par_iter()
        .map(|t| {
            let ids = bins.tile_ids(t);
            let mut grads = vec![SplatGrad::default(); ids.len()];
            if ids.is_empty() {
                return grads;
            }
            let splats: Vec<ProjectedGaussian> = ids
                .iter()
                .map(|&i| projected[i as usize].expect("binned splat is visible"))
                .collect();
            let (x0, x1, y0, y1) = bins.tile_bounds(t, w, h);
            let tw = x1 - x0;
            let mut contribs: Vec<Vec<Contribution>> = vec![Vec::new(); tw * (y1 - y0)];
            let accs = composite_tile(
                (x0, x1, y0, y1),
                &splats,
                settings,
                settings.transmittance_stop,
                |k, c| contribs[k].push(c),
            );
            for (k, (acc, list)) in accs.iter().zip(&contribs).enumerate() {
                if list.is_empty() {
                    continue;
                }
                let idx = (y0 + k / tw) * w + x0 + k % tw;
                let pu = pixel_upstream(acc, upstream, idx, settings);
                backprop_pixel(list, &splats, &pu, &mut grads);
            }
            grads
        })
        .collect();

    let n = cloud.len();
    let mut splat_grads = vec![SplatGrad::default(); n];
    for (t, grads) in tile_grads.iter().enumerate() {
        for (g, &id) in grads.iter().zip(bins.tile_ids(t)) {
            splat_grads[id as usize].add_assign(g);
        }
    }

    let stride = cloud.sh_stride();
    let mut out = CloudGradients::zeros(n, stride);
    let view = CameraView::new(camera);
    let params: Vec<Option<ParamGrad>> = out
        .sh_coeffs
        .par_chunks_mut(stride.max(1))
        .with_min_len(64)
        .enumerate()
        .map(|(i, d_sh)| {
            projected[i].map(|_| project_backward(cloud, i, &view, settings, &splat_grads[i], d_sh))
        })
        .collect();
    for (i, p) in params.into_iter().enumerate() {
        if let Some(p) = p {
            out.positions[i] = p.position;
            out.rotations[i] = p.rotation;
            out.log_scales[i] = p.log_scale;
            out.opacity_logits[i] = p.opacity_logit;
            out.screen[i] = splat_grads[i].mean;
        }
    }
    Ok(out)
}
