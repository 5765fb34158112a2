//! Procedural deforming scene written as a complete dataset: a textured
//! sheet of Gaussians that translates rigidly and bulges over time, with
//! metric depth rendered from the ground truth.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DepthKind, FrameRecord, Manifest};
use crate::error::{Error, Result};
use crate::io;
use crate::rasterizer::{render, RenderSettings};
use crate::scene::{inverse_sigmoid, Camera, GaussianCloud, GaussianParams};
use crate::sh;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Grid columns × rows of the sheet.
    pub grid: [usize; 2],
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Sheet distance from the camera at `t = 0`.
    pub depth: f64,
    /// Rigid translation over the whole clip.
    pub translation: [f64; 3],
    /// Peak bulge towards the camera, reached at `t = 0.5`.
    pub bulge: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            grid: [20, 10],
            frames: 10,
            width: 64,
            height: 64,
            focal: 70.0,
            depth: 3.0,
            translation: [0.05, 0.03, -0.25],
            bulge: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn camera(&self) -> Camera {
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        Camera::looking_down_z(self.focal, self.focal, cx, cy, self.width, self.height)
    }

    pub fn num_gaussians(&self) -> usize {
        self.grid[0] * self.grid[1]
    }
}

/// Ground-truth sheet in its rest pose.
pub fn canonical_cloud(cfg: &SyntheticConfig) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cam = cfg.camera();
    // cover the view plus the lateral motion
    let half_w = 1.25 * (cfg.width as f64 / 2.0) / cam.fx * cfg.depth;
    let half_h = 1.25 * (cfg.height as f64 / 2.0) / cam.fy * cfg.depth;
    let [nx, ny] = cfg.grid;
    let (dx, dy) = (2.0 * half_w / nx as f64, 2.0 * half_h / ny as f64);
    let mut cloud = GaussianCloud::new(0);
    for j in 0..ny {
        for i in 0..nx {
            let x = -half_w + (i as f64 + 0.5 + rng.random_range(-0.3..0.3)) * dx;
            let y = -half_h + (j as f64 + 0.5 + rng.random_range(-0.3..0.3)) * dy;
            let u = x / half_w;
            let v = y / half_h;
            let rgb = [
                0.5 + 0.35 * (2.5 * u + 0.6).sin(),
                0.5 + 0.35 * (2.0 * v - 0.3).cos(),
                0.5 + 0.3 * (1.7 * (u + v)).sin(),
            ];
            let angle: f64 = rng.random_range(-0.5..0.5);
            cloud.push(GaussianParams {
                position: [x, y, cfg.depth + rng.random_range(-0.02..0.02)],
                rotation: [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()],
                log_scale: [(0.75 * dx).ln(), (0.75 * dy).ln(), (0.01f64).ln()],
                opacity_logit: inverse_sigmoid(0.95),
                sh: rgb.map(sh::rgb_to_dc).to_vec(),
            });
        }
    }
    cloud
}

/// The sheet at normalized time `t`.
pub fn cloud_at(cfg: &SyntheticConfig, canonical: &GaussianCloud, t: f64) -> GaussianCloud {
    let mut c = canonical.clone();
    let bump = (std::f64::consts::PI * t).sin();
    for p in &mut c.positions {
        let r2 = p[0] * p[0] + p[1] * p[1];
        p[2] -= cfg.bulge * bump * (-r2 / (2.0 * 0.6 * 0.6)).exp();
        for a in 0..3 {
            p[a] += t * cfg.translation[a];
        }
    }
    c
}

/// Writes images, masks, metric PFM depth and `manifest.json` into `dir`.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, cfg: &SyntheticConfig) -> Result<PathBuf> {
    if cfg.frames < 2 {
        return Err(Error::Config(
            "synthetic scene needs at least two frames".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cam = cfg.camera();
    let canonical = canonical_cloud(cfg);
    let settings = RenderSettings::default();
    let (w, h) = (cfg.width, cfg.height);
    let mut frames = Vec::with_capacity(cfg.frames);
    for k in 0..cfg.frames {
        let t = k as f64 / (cfg.frames - 1) as f64;
        let out = render(&cloud_at(cfg, &canonical, t), &cam, &settings);
        let names = [
            format!("frame_{k:03}.png"),
            format!("depth_{k:03}.pfm"),
            format!("mask_{k:03}.png"),
        ];
        io::save_rgb(&dir.join(&names[0]), w, h, &out.color)?;
        io::write_pfm(&dir.join(&names[1]), w, h, &out.depth)?;
        io::save_mask(&dir.join(&names[2]), w, h, &vec![true; w * h])?;
        frames.push(FrameRecord {
            image: names[0].clone().into(),
            depth: names[1].clone().into(),
            mask: Some(names[2].clone().into()),
            time: k as f64 * 0.1,
            camera: None,
        });
    }
    let manifest = Manifest {
        camera: Some(cam.to_spec()),
        beta: 1000.0,
        depth_kind: DepthKind::Metric,
        frames,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        context: "manifest".into(),
        source,
    })?;
    io::write_file(&path, text.as_bytes())?;
    Ok(path)
}
