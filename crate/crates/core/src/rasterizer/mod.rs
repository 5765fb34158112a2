//! Differentiable software rasterizer.
//!
//! Gaussians are projected to screen-space ellipses, binned into 16×16
//! tiles, globally sorted by `(tile, depth, index)`, and alpha-composited
//! front to back. Four maps come out of a pass: color, expected depth,
//! confidence (accumulated blending weight) and a blended normal map.
//!
//! [`render_reference`] composites every pixel against the full depth-sorted
//! list with no tiling and no early termination. Both paths share
//! [`composite_pixel`], so they agree bit-for-bit except where early
//! termination cut a pixel short.

mod backward;
mod project;

use rayon::prelude::*;

pub use backward::{render_backward, CloudGradients, RenderGradients};
pub use project::{screen_covariance, ProjectedGaussian, SplatGrad};

use crate::scene::{Camera, GaussianCloud};
use project::{project_one, CameraView};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    pub alpha_max: f64,
    pub alpha_min: f64,
    /// Compositing stops once transmittance falls below this value.
    pub transmittance_stop: f64,
    /// Added to the screen covariance diagonal.
    pub low_pass: f64,
    /// Confidence below which the depth map is left at zero.
    pub depth_eps: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_stop: 1e-4,
            low_pass: 0.3,
            depth_eps: 1e-8,
        }
    }
}

/// Per-pixel render buffers, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    /// Accumulated blending weight `1 - T_final`.
    pub confidence: Vec<f64>,
    pub normal: Vec<[f64; 3]>,
    /// Number of Gaussians blended into each pixel.
    pub n_contrib: Vec<u32>,
    /// Projection of every Gaussian of the rendered cloud (`None` = culled).
    pub projected: Vec<Option<ProjectedGaussian>>,
}

impl RenderOutput {
    fn empty(width: usize, height: usize, n: usize) -> Self {
        let px = width * height;
        Self {
            width,
            height,
            color: vec![[0.0; 3]; px],
            depth: vec![0.0; px],
            confidence: vec![0.0; px],
            normal: vec![[0.0; 3]; px],
            n_contrib: vec![0; px],
            projected: vec![None; n],
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Running sums for one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PixelAccum {
    pub color: [f64; 3],
    pub depth_sum: f64,
    pub normal_sum: [f64; 3],
    pub transmittance: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub count: u32,
}

impl PixelAccum {
    pub fn confidence(&self) -> f64 {
        1.0 - self.transmittance
    }

    /// Expected depth, clamped into the contributor range to absorb rounding.
    pub fn depth(&self, eps: f64) -> f64 {
        let w = self.confidence();
        if w > eps && self.count > 0 {
            (self.depth_sum / w).clamp(self.depth_min, self.depth_max)
        } else {
            0.0
        }
    }

    pub fn normal(&self) -> [f64; 3] {
        let n = self.normal_sum;
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if self.count > 0 && len > 1e-12 {
            n.map(|v| v / len)
        } else {
            [0.0; 3]
        }
    }
}

/// One blended contribution, as seen by [`composite_pixel`]'s visitor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    /// Position of the splat in the iterated list.
    pub slot: usize,
    pub alpha: f64,
    /// Unscaled Gaussian falloff `exp(-q/2)`.
    pub falloff: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
    pub clamped: bool,
    pub dx: f64,
    pub dy: f64,
}

impl PixelAccum {
    fn new() -> Self {
        Self {
            color: [0.0; 3],
            depth_sum: 0.0,
            normal_sum: [0.0; 3],
            transmittance: 1.0,
            depth_min: f64::INFINITY,
            depth_max: f64::NEG_INFINITY,
            count: 0,
        }
    }

    /// Blends splat `g` (list position `slot`) into this pixel. Returns true
    /// once the pixel is saturated and later splats must be skipped.
    #[inline(always)]
    fn blend<F: FnMut(Contribution)>(
        &mut self,
        px: f64,
        py: f64,
        slot: usize,
        g: &ProjectedGaussian,
        settings: &RenderSettings,
        stop: f64,
        visit: &mut F,
    ) -> bool {
        let dx = px - g.mean[0];
        let dy = py - g.mean[1];
        if dx.abs() > g.radius || dy.abs() > g.radius {
            return false;
        }
        let power =
            0.5 * (g.conic[0] * dx * dx + 2.0 * g.conic[1] * dx * dy + g.conic[2] * dy * dy);
        let falloff = (-power).exp();
        let raw = g.opacity * falloff;
        let clamped = raw > settings.alpha_max;
        let alpha = if clamped { settings.alpha_max } else { raw };
        if alpha < settings.alpha_min {
            return false;
        }
        let t = self.transmittance;
        let w = alpha * t;
        for k in 0..3 {
            self.color[k] += g.color[k] * w;
            self.normal_sum[k] += g.normal[k] * w;
        }
        self.depth_sum += g.depth * w;
        self.depth_min = self.depth_min.min(g.depth);
        self.depth_max = self.depth_max.max(g.depth);
        self.count += 1;
        visit(Contribution {
            slot,
            alpha,
            falloff,
            transmittance: t,
            clamped,
            dx,
            dy,
        });
        self.transmittance = t * (1.0 - alpha);
        self.transmittance < stop
    }
}

/// Front-to-back compositing of one pixel over an ordered splat list.
#[inline(always)]
pub(crate) fn composite_pixel<'a, I, F>(
    px: f64,
    py: f64,
    splats: I,
    settings: &RenderSettings,
    stop: f64,
    mut visit: F,
) -> PixelAccum
where
    I: Iterator<Item = &'a ProjectedGaussian>,
    F: FnMut(Contribution),
{
    let mut acc = PixelAccum::new();
    for (slot, g) in splats.enumerate() {
        if acc.blend(px, py, slot, g, settings, stop, &mut visit) {
            break;
        }
    }
    acc
}

/// Composites a whole tile splat-major: each splat visits only the pixels
/// of its rectangle. Per pixel, the blend sequence is exactly that of
/// [`composite_pixel`] over the same list. `visit` receives the pixel's
/// row-major index within the tile.
pub(crate) fn composite_tile<F>(
    bounds: (usize, usize, usize, usize),
    splats: &[ProjectedGaussian],
    settings: &RenderSettings,
    stop: f64,
    mut visit: F,
) -> Vec<PixelAccum>
where
    F: FnMut(usize, Contribution),
{
    let (x0, x1, y0, y1) = bounds;
    let tw = x1 - x0;
    let mut accs = vec![PixelAccum::new(); tw * (y1 - y0)];
    let mut done = vec![false; accs.len()];
    let mut live = accs.len();
    for (slot, g) in splats.iter().enumerate() {
        if live == 0 {
            break;
        }
        let [u0, u1, v0, v1] = g.rect;
        for y in v0.max(y0)..=v1.min(y1 - 1) {
            for x in u0.max(x0)..=u1.min(x1 - 1) {
                let k = (y - y0) * tw + (x - x0);
                if done[k] {
                    continue;
                }
                let mut v = |c| visit(k, c);
                if accs[k].blend(x as f64, y as f64, slot, g, settings, stop, &mut v) {
                    done[k] = true;
                    live -= 1;
                }
            }
        }
    }
    accs
}

fn project_all(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
) -> Vec<Option<ProjectedGaussian>> {
    let view = CameraView::new(camera);
    (0..cloud.len())
        .into_par_iter()
        .with_min_len(256)
        .map(|i| project_one(cloud, i, &view, settings))
        .collect()
}

/// Splat instances grouped by tile, each group in depth order.
#[derive(Debug, Clone)]
pub(crate) struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_size: usize,
    /// `ranges[t]..ranges[t + 1]` indexes `ids` for tile `t`.
    pub ranges: Vec<usize>,
    pub ids: Vec<u32>,
}

impl TileBins {
    pub fn build(
        projected: &[Option<ProjectedGaussian>],
        width: usize,
        height: usize,
        tile_size: usize,
    ) -> Self {
        let tiles_x = width.div_ceil(tile_size);
        let tiles_y = height.div_ceil(tile_size);
        let mut keys: Vec<(u32, f64, u32)> = Vec::new();
        for (i, p) in projected.iter().enumerate() {
            let Some(p) = p else { continue };
            let [u0, u1, v0, v1] = p.rect;
            for ty in v0 / tile_size..=v1 / tile_size {
                for tx in u0 / tile_size..=u1 / tile_size {
                    keys.push(((ty * tiles_x + tx) as u32, p.depth, i as u32));
                }
            }
        }
        // keys are unique, so the unstable sort is deterministic
        keys.par_sort_unstable_by(|a, b| {
            a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        let n_tiles = tiles_x * tiles_y;
        let mut ranges = vec![0usize; n_tiles + 1];
        for k in &keys {
            ranges[k.0 as usize + 1] += 1;
        }
        for t in 0..n_tiles {
            ranges[t + 1] += ranges[t];
        }
        Self {
            tiles_x,
            tiles_y,
            tile_size,
            ranges,
            ids: keys.into_iter().map(|k| k.2).collect(),
        }
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub fn tile_ids(&self, t: usize) -> &[u32] {
        &self.ids[self.ranges[t]..self.ranges[t + 1]]
    }

    /// Inclusive-exclusive pixel bounds `(x0, x1, y0, y1)` of tile `t`.
    pub fn tile_bounds(
        &self,
        t: usize,
        width: usize,
        height: usize,
    ) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (
            x0,
            (x0 + self.tile_size).min(width),
            y0,
            (y0 + self.tile_size).min(height),
        )
    }
}

fn write_pixel(out: &mut RenderOutput, idx: usize, acc: &PixelAccum, settings: &RenderSettings) {
    out.color[idx] = acc.color;
    out.depth[idx] = acc.depth(settings.depth_eps);
    out.confidence[idx] = acc.confidence();
    out.normal[idx] = acc.normal();
    out.n_contrib[idx] = acc.count;
}

/// Tiled forward pass.
pub fn render(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let mut out = RenderOutput::empty(w, h, cloud.len());
    out.projected = project_all(cloud, camera, settings);
    let bins = TileBins::build(&out.projected, w, h, settings.tile_size);
    let projected = &out.projected;

    let tiles: Vec<Vec<PixelAccum>> = (0..bins.num_tiles())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = bins.tile_bounds(t, w, h);
            let splats: Vec<ProjectedGaussian> = bins
                .tile_ids(t)
                .iter()
                .map(|&i| projected[i as usize].expect("binned splat is visible"))
                .collect();
            composite_tile(
                (x0, x1, y0, y1),
                &splats,
                settings,
                settings.transmittance_stop,
                |_, _| {},
            )
        })
        .collect();

    for (t, accs) in tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = bins.tile_bounds(t, w, h);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                write_pixel(&mut out, y * w + x, &accs[k], settings);
                k += 1;
            }
        }
    }
    out
}

/// Untiled oracle: every pixel walks the whole depth-sorted list and never
/// terminates early.
pub fn render_reference(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let mut out = RenderOutput::empty(w, h, cloud.len());
    out.projected = project_all(cloud, camera, settings);
    let mut order: Vec<usize> = (0..cloud.len())
        .filter(|&i| out.projected[i].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (
            out.projected[a].unwrap().depth,
            out.projected[b].unwrap().depth,
        );
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let sorted: Vec<ProjectedGaussian> = order.iter().map(|&i| out.projected[i].unwrap()).collect();

    let rows: Vec<Vec<PixelAccum>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| composite_pixel(x as f64, y as f64, sorted.iter(), settings, 0.0, |_| {}))
                .collect()
        })
        .collect();
    for (y, row) in rows.iter().enumerate() {
        for (x, acc) in row.iter().enumerate() {
            write_pixel(&mut out, y * w + x, acc, settings);
        }
    }
    out
}
