//! Image quality metrics.

use crate::error::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptySelection("image"));
    }
    Ok(())
}

pub fn mse(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    check(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(b)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]) * (p[c] - q[c])))
        .sum();
    Ok(sum / (3 * a.len()) as f64)
}

/// Peak signal-to-noise ratio for unit peak; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over all fully contained window positions.
fn filter_valid(x: &[f64], width: usize, height: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (ow, oh) = (width - k + 1, height - k + 1);
    let mut rows = vec![0.0; ow * height];
    for v in 0..height {
        for u in 0..ow {
            rows[v * ow + u] = (0..k).map(|j| win[j] * x[v * width + u + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for v in 0..oh {
        for u in 0..ow {
            out[v * ow + u] = (0..k).map(|j| win[j] * rows[(v + j) * ow + u]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), evaluated at
/// every fully contained window position, per channel, then averaged.
/// Images smaller than the window use a window as large as the image.
pub fn ssim(a: &[[f64; 3]], b: &[[f64; 3]], width: usize, height: usize) -> Result<f64> {
    check(a, b)?;
    if a.len() != width * height {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: width * height,
        });
    }
    let win = gaussian_window(SSIM_WINDOW.min(width).min(height));
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = b.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ..) = filter_valid(&x, width, height, &win);
        let (my, ..) = filter_valid(&y, width, height, &win);
        let (sxx, ..) = filter_valid(&xx, width, height, &win);
        let (syy, ..) = filter_valid(&yy, width, height, &win);
        let (sxy, ..) = filter_valid(&xy, width, height, &win);
        let n = mx.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}
