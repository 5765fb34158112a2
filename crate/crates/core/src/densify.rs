//! Adaptive density control: clone small Gaussians and split large ones
//! whose screen-space positional gradient is consistently high, and prune
//! nearly transparent ones.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adam::CloudMoments;
use crate::scene::{quat_to_rotation, GaussianCloud};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub interval: usize,
    pub start: usize,
    /// Densification stops after this fraction of all iterations.
    pub stop_fraction: f64,
    /// Threshold on the mean NDC-space positional gradient norm.
    pub grad_threshold: f64,
    /// Gaussians with max scale at most this fraction of the scene extent
    /// are cloned; larger ones are split.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub min_opacity: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 500,
            stop_fraction: 0.8,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_factor: 1.6,
            min_opacity: 0.005,
            max_gaussians: 200_000,
        }
    }
}

impl DensifyConfig {
    /// Whether densification runs after iteration `iter` (1-based) of
    /// `total`.
    pub fn is_due(&self, iter: usize, total: usize) -> bool {
        self.interval > 0
            && iter >= self.start
            && (iter as f64) <= self.stop_fraction * total as f64
            && iter % self.interval == 0
    }
}

/// Running sums of per-Gaussian screen-space gradient norms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Adds one view. Pixel gradients are scaled to NDC units (×W/2, ×H/2);
    /// only visible Gaussians are counted.
    pub fn accumulate(
        &mut self,
        screen: &[[f64; 2]],
        visible: &[bool],
        width: usize,
        height: usize,
    ) {
        let (sx, sy) = (width as f64 * 0.5, height as f64 * 0.5);
        for i in 0..self.sum.len() {
            if visible[i] {
                let g = [screen[i][0] * sx, screen[i][1] * sy];
                self.sum[i] += (g[0] * g[0] + g[1] * g[1]).sqrt();
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// Densification was skipped because of the size cap.
    pub capped: bool,
}

/// Runs one densify-and-prune pass. Moments of new Gaussians start at zero;
/// moments of removed ones are dropped. `stats` is reset.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    moments: &mut CloudMoments,
    stats: &mut GradStats,
    cfg: &DensifyConfig,
    scene_extent: f64,
    rng: &mut impl Rng,
) -> DensifyReport {
    let n = cloud.len();
    let stride = cloud.sh_stride();
    let mut report = DensifyReport::default();
    let selected: Vec<bool> = (0..n)
        .map(|i| stats.mean(i) >= cfg.grad_threshold)
        .collect();
    let small: Vec<bool> = (0..n)
        .map(|i| cloud.scale(i).max() <= cfg.percent_dense * scene_extent)
        .collect();
    let clones: Vec<usize> = (0..n).filter(|&i| selected[i] && small[i]).collect();
    let splits: Vec<usize> = (0..n).filter(|&i| selected[i] && !small[i]).collect();

    // each split replaces one Gaussian with two
    let grown = n + clones.len() + splits.len();
    let mut keep = vec![true; n];
    if grown > cfg.max_gaussians && !(clones.is_empty() && splits.is_empty()) {
        log::warn!(
            "densification skipped: {grown} Gaussians would exceed the cap of {}",
            cfg.max_gaussians
        );
        report.capped = true;
    } else {
        for &i in &clones {
            cloud.push(cloud.get(i));
        }
        for &i in &splits {
            let g = cloud.get(i);
            let rot = quat_to_rotation(cloud.unit_rotation(i));
            let scale = cloud.scale(i);
            for _ in 0..2 {
                let z = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let offset = rot * scale.component_mul(&z);
                let mut child = g.clone();
                for a in 0..3 {
                    child.position[a] += offset[a];
                    child.log_scale[a] = (scale[a] / cfg.split_factor).ln();
                }
                cloud.push(child);
            }
            keep[i] = false;
        }
        report.cloned = clones.len();
        report.split = splits.len();
        moments.grow(clones.len() + 2 * splits.len(), stride);
    }

    keep.resize(cloud.len(), true);
    for (i, k) in keep.iter_mut().enumerate() {
        if cloud.opacity(i) < cfg.min_opacity {
            *k = false;
        }
    }
    report.pruned = keep.iter().filter(|&&k| !k).count() - report.split;
    cloud.retain_mask(&keep);
    moments.retain(&keep, stride);
    *stats = GradStats::new(cloud.len());
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterizer::{render, RenderSettings};
    use crate::scene::{inverse_sigmoid, Camera, GaussianParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud() -> GaussianCloud {
        let mut c = GaussianCloud::new(0);
        for (i, (s, o)) in [(-5.0, 0.5), (-1.0, 0.5), (-5.0, 0.001), (-5.0, 0.7)]
            .iter()
            .enumerate()
        {
            c.push(GaussianParams {
                position: [0.1 * i as f64, 0.0, 3.0],
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [*s; 3],
                opacity_logit: inverse_sigmoid(*o),
                sh: vec![0.3, 0.2, 0.1],
            });
        }
        c
    }

    fn run(c: &mut GaussianCloud, grads: &[f64], cfg: &DensifyConfig) -> DensifyReport {
        let mut m = CloudMoments::zeros(c.len(), c.sh_stride());
        m.positions.m.fill(1.0);
        let mut stats = GradStats::new(c.len());
        stats.sum = grads.to_vec();
        stats.count = vec![1; c.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = densify_and_prune(c, &mut m, &mut stats, cfg, 1.0, &mut rng);
        assert_eq!(m.positions.len(), 3 * c.len());
        assert_eq!(m.sh_coeffs.len(), c.sh_stride() * c.len());
        r
    }

    #[test]
    fn below_threshold_only_prunes() {
        let mut c = cloud();
        let cfg = DensifyConfig::default();
        let r = run(&mut c, &[0.0; 4], &cfg);
        assert_eq!((r.cloned, r.split, r.pruned), (0, 0, 1));
        assert_eq!(c.len(), 3);
        let mut d = cloud();
        d.opacity_logits[2] = 0.0;
        run(&mut d, &[1e-5; 4], &cfg);
        assert_eq!(d, cloud_with_opacity_fix());
    }

    fn cloud_with_opacity_fix() -> GaussianCloud {
        let mut c = cloud();
        c.opacity_logits[2] = 0.0;
        c
    }

    #[test]
    fn small_gaussian_is_cloned_exactly() {
        let mut c = cloud();
        let before = c.clone();
        let r = run(&mut c, &[1e-3, 0.0, 0.0, 0.0], &DensifyConfig::default());
        assert_eq!((r.cloned, r.split, r.pruned), (1, 0, 1));
        assert_eq!(c.len(), 4);
        assert_eq!(c.get(3), before.get(0));
        assert_eq!(c.get(0), before.get(0));
    }

    #[test]
    fn large_gaussian_is_split() {
        let mut c = cloud();
        let r = run(&mut c, &[0.0, 1e-3, 0.0, 0.0], &DensifyConfig::default());
        assert_eq!((r.cloned, r.split, r.pruned), (0, 1, 1));
        assert_eq!(c.len(), 4);
        for i in 2..4 {
            assert!((c.scale(i)[0] - (-1.0f64).exp() / 1.6).abs() < 1e-12);
        }
    }

    #[test]
    fn cap_skips_densification() {
        let mut c = cloud();
        let cfg = DensifyConfig {
            max_gaussians: 4,
            ..Default::default()
        };
        let r = run(&mut c, &[1e-3; 4], &cfg);
        assert!(r.capped);
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn pruning_invisible_gaussians_keeps_render() {
        // opacity below the 1/255 compositing cutoff never contributes
        let mut c = cloud();
        let cam = Camera::looking_down_z(40.0, 40.0, 15.5, 15.5, 32, 32);
        let settings = RenderSettings::default();
        let before = render(&c, &cam, &settings);
        run(&mut c, &[0.0; 4], &DensifyConfig::default());
        let after = render(&c, &cam, &settings);
        assert_eq!(before.color, after.color);
        assert_eq!(before.depth, after.depth);
    }

    #[test]
    fn schedule() {
        let cfg = DensifyConfig::default();
        assert!(!cfg.is_due(400, 4000));
        assert!(cfg.is_due(500, 4000));
        assert!(!cfg.is_due(550, 4000));
        assert!(cfg.is_due(3200, 4000));
        assert!(!cfg.is_due(3300, 4000));
    }
}
