//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moments for one tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Keeps entries of rows (of `stride` values) where `keep` is true.
    pub fn retain_rows(&mut self, stride: usize, keep: &[bool]) {
        for buf in [&mut self.m, &mut self.v] {
            let old = std::mem::take(buf);
            *buf = old
                .chunks(stride)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(row, _)| row.iter().copied())
                .collect();
        }
    }

    /// Appends zeroed rows.
    pub fn grow(&mut self, extra: usize) {
        self.m.resize(self.m.len() + extra, 0.0);
        self.v.resize(self.v.len() + extra, 0.0);
    }
}

/// Moments for every per-Gaussian tensor of a cloud, row-aligned with it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CloudMoments {
    pub positions: Moments,
    pub rotations: Moments,
    pub log_scales: Moments,
    pub opacity_logits: Moments,
    pub sh_coeffs: Moments,
}

impl CloudMoments {
    pub fn zeros(n: usize, sh_stride: usize) -> Self {
        Self {
            positions: Moments::zeros(3 * n),
            rotations: Moments::zeros(4 * n),
            log_scales: Moments::zeros(3 * n),
            opacity_logits: Moments::zeros(n),
            sh_coeffs: Moments::zeros(sh_stride * n),
        }
    }

    pub fn retain(&mut self, keep: &[bool], sh_stride: usize) {
        self.positions.retain_rows(3, keep);
        self.rotations.retain_rows(4, keep);
        self.log_scales.retain_rows(3, keep);
        self.opacity_logits.retain_rows(1, keep);
        self.sh_coeffs.retain_rows(sh_stride, keep);
    }

    /// Appends zeroed moments for `extra` new Gaussians.
    pub fn grow(&mut self, extra: usize, sh_stride: usize) {
        self.positions.grow(3 * extra);
        self.rotations.grow(4 * extra);
        self.log_scales.grow(3 * extra);
        self.opacity_logits.grow(extra);
        self.sh_coeffs.grow(sh_stride * extra);
    }

    /// Tensors in a fixed order: positions, rotations, log-scales, opacity
    /// logits, SH.
    pub fn tensors(&self) -> [&Moments; 5] {
        [
            &self.positions,
            &self.rotations,
            &self.log_scales,
            &self.opacity_logits,
            &self.sh_coeffs,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Moments; 5] {
        [
            &mut self.positions,
            &mut self.rotations,
            &mut self.log_scales,
            &mut self.opacity_logits,
            &mut self.sh_coeffs,
        ]
    }
}

/// One update at 1-based `step`. Elements with a non-finite gradient keep
/// their value and moments; their count is returned.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    lr: f64,
    step: u64,
    cfg: &AdamConfig,
) -> usize {
    assert_eq!(params.len(), grads.len(), "adam: gradient shape mismatch");
    assert_eq!(params.len(), moments.len(), "adam: moment shape mismatch");
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let mut skipped = 0;
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            skipped += 1;
            continue;
        }
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        params[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
    }
    skipped
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut m = Moments {
            m: vec![0.5, 0.5],
            v: vec![0.25, 0.25],
        };
        adam_step(&mut p, &[0.0, 0.0], &mut m, 0.1, 3, &AdamConfig::default());
        assert_eq!(m.m, vec![0.45, 0.45]);
        assert!((m.v[0] - 0.24975).abs() < 1e-15);
        // m̂ ≠ 0 still moves parameters; with fresh moments nothing moves
        let mut q = vec![1.0, -2.0];
        let mut fresh = Moments::zeros(2);
        adam_step(
            &mut q,
            &[0.0, 0.0],
            &mut fresh,
            0.1,
            1,
            &AdamConfig::default(),
        );
        assert_eq!(q, vec![1.0, -2.0]);
        assert!(p[0] < 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut m = Moments::zeros(3);
        adam_step(
            &mut p,
            &[3.0, -1e-6, 250.0],
            &mut m,
            0.01,
            1,
            &AdamConfig::default(),
        );
        for (v, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 0.01).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut p = vec![1.0];
        let mut m = Moments::zeros(1);
        let mut last = p[0];
        for step in 1..=5 {
            adam_step(&mut p, &[0.7], &mut m, 0.05, step, &AdamConfig::default());
            assert!(p[0] < last);
            last = p[0];
        }
    }

    #[test]
    fn non_finite_gradients_are_skipped() {
        let mut p = vec![1.0, 1.0, 1.0];
        let mut m = Moments::zeros(3);
        let n = adam_step(
            &mut p,
            &[f64::NAN, 1.0, f64::INFINITY],
            &mut m,
            0.1,
            1,
            &AdamConfig::default(),
        );
        assert_eq!(n, 2);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[2], 1.0);
        assert_eq!(m.m[0], 0.0);
        assert!(p[1] < 1.0);
    }

    #[test]
    fn retain_and_grow() {
        let mut m = Moments {
            m: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            v: vec![1.0; 6],
        };
        m.retain_rows(2, &[true, false, true]);
        assert_eq!(m.m, vec![1.0, 2.0, 5.0, 6.0]);
        m.grow(2);
        assert_eq!(m.m, vec![1.0, 2.0, 5.0, 6.0, 0.0, 0.0]);
    }
}
