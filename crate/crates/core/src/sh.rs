//! Real spherical-harmonics color evaluation (degrees 0..=3).
//!
//! Coefficients for one Gaussian are stored band-major: `coeffs[k * 3 + c]`
//! is band `k`, channel `c`. The DC band carries the conventional +0.5
//! offset and the resulting color is clamped at zero.

use nalgebra::Vector3;

pub const MAX_SH_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Y00, the constant DC basis value `1 / (2 sqrt(pi))`.
pub const SH_DC: f64 = C0;

pub const fn num_bands(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Converts an RGB color in [0,1] into the DC coefficient that reproduces it.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / C0
}

/// Fills `out[..num_bands(degree)]` with the basis values at `dir`.
pub fn basis(dir: &Vector3<f64>, degree: usize, out: &mut [f64]) {
    debug_assert!(degree <= MAX_SH_DEGREE);
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = C0;
    if degree == 0 {
        return;
    }
    out[1] = -C1 * y;
    out[2] = C1 * z;
    out[3] = -C1 * x;
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = C2[0] * x * y;
    out[5] = C2[1] * y * z;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * x * z;
    out[8] = C2[4] * (xx - yy);
    if degree == 2 {
        return;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * x * y * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
}

/// Partial derivatives of each basis function with respect to the
/// (unnormalized-free) direction components.
fn basis_grad(dir: &Vector3<f64>, degree: usize, out: &mut [[f64; 3]]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = [0.0; 3];
    if degree == 0 {
        return;
    }
    out[1] = [0.0, -C1, 0.0];
    out[2] = [0.0, 0.0, C1];
    out[3] = [-C1, 0.0, 0.0];
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = [C2[0] * y, C2[0] * x, 0.0];
    out[5] = [0.0, C2[1] * z, C2[1] * y];
    out[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
    out[7] = [C2[3] * z, 0.0, C2[3] * x];
    out[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    if degree == 2 {
        return;
    }
    out[9] = [6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    out[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
    out[11] = [
        -2.0 * C3[2] * x * y,
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * C3[2] * y * z,
    ];
    out[12] = [
        -6.0 * C3[3] * x * z,
        -6.0 * C3[3] * y * z,
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    out[13] = [
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * C3[4] * x * y,
        8.0 * C3[4] * x * z,
    ];
    out[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
    out[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0];
}

/// Evaluates the view-dependent color. Bands above `degree` are ignored.
pub fn eval_sh(coeffs: &[f64], dir: &Vector3<f64>, degree: usize) -> [f64; 3] {
    let raw = eval_sh_raw(coeffs, dir, degree);
    raw.map(|v| v.max(0.0))
}

/// Color before the clamp at zero (the offset is already applied).
pub fn eval_sh_raw(coeffs: &[f64], dir: &Vector3<f64>, degree: usize) -> [f64; 3] {
    let bands = num_bands(degree);
    debug_assert!(coeffs.len() >= bands * 3);
    let mut b = [0.0; 16];
    basis(dir, degree, &mut b);
    let mut rgb = [0.5; 3];
    for (k, bk) in b.iter().take(bands).enumerate() {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += bk * coeffs[k * 3 + c];
        }
    }
    rgb
}

/// Backward pass of [`eval_sh`]. Accumulates coefficient gradients into
/// `d_coeffs` and returns the gradient with respect to `dir`.
pub fn eval_sh_backward(
    coeffs: &[f64],
    dir: &Vector3<f64>,
    degree: usize,
    d_rgb: [f64; 3],
    d_coeffs: &mut [f64],
) -> Vector3<f64> {
    let raw = eval_sh_raw(coeffs, dir, degree);
    // clamped channels pass no gradient
    let g: [f64; 3] = std::array::from_fn(|c| if raw[c] < 0.0 { 0.0 } else { d_rgb[c] });
    let bands = num_bands(degree);
    let mut b = [0.0; 16];
    basis(dir, degree, &mut b);
    for k in 0..bands {
        for c in 0..3 {
            d_coeffs[k * 3 + c] += b[k] * g[c];
        }
    }
    let mut db = [[0.0; 3]; 16];
    basis_grad(dir, degree, &mut db);
    let mut d_dir = Vector3::zeros();
    for k in 1..bands {
        let s: f64 = (0..3).map(|c| coeffs[k * 3 + c] * g[c]).sum();
        for a in 0..3 {
            d_dir[a] += s * db[k][a];
        }
    }
    d_dir
}
