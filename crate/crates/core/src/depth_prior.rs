//! Depth prior processing: inverse-depth recovery, back-projection into an
//! initial point set, finite-difference depth gradients, pseudo normals and
//! per-frame min-max normalization.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::Camera;

/// Inverse depths at or below this are treated as missing.
pub const INVERSE_DEPTH_EPS: f64 = 1e-6;

/// Row-major depth values with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Metric depth; pixels that are non-positive or non-finite are invalid.
    pub fn from_metric(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(values.len(), width * height)?;
        let valid = values.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn check_len(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::LengthMismatch {
            left: found,
            right: expected,
        });
    }
    Ok(())
}

/// `D = β / D_inv` where `D_inv > ε`; other pixels are invalid with value 0.
pub fn recover_metric_depth(
    width: usize,
    height: usize,
    inverse_depth: &[f64],
    beta: f64,
) -> Result<DepthMap> {
    check_len(inverse_depth.len(), width * height)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!(
            "depth scale must be positive, got {beta}"
        )));
    }
    let mut values = vec![0.0; inverse_depth.len()];
    let mut valid = vec![false; inverse_depth.len()];
    for (i, &v) in inverse_depth.iter().enumerate() {
        if v.is_finite() && v > INVERSE_DEPTH_EPS {
            values[i] = beta / v;
            valid[i] = true;
        }
    }
    Ok(DepthMap {
        width,
        height,
        values,
        valid,
    })
}

/// Colored world-space points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Back-projects every valid masked pixel on the `stride` grid through the
/// pinhole model. If more than `max_points` survive, an evenly spaced
/// subset is kept.
pub fn backproject(
    image: &[[f64; 3]],
    depth: &DepthMap,
    mask: &[bool],
    camera: &Camera,
    stride: usize,
    max_points: usize,
) -> Result<PointSet> {
    let (w, h) = (depth.width, depth.height);
    if camera.width != w || camera.height != h {
        return Err(Error::Shape(format!(
            "camera is {}x{} but depth is {w}x{h}",
            camera.width, camera.height
        )));
    }
    check_len(image.len(), w * h)?;
    check_len(mask.len(), w * h)?;
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let mut out = PointSet::default();
    for v in (0..h).step_by(stride) {
        for u in (0..w).step_by(stride) {
            let i = v * w + u;
            if !(mask[i] && depth.valid[i]) {
                continue;
            }
            let d = depth.values[i];
            let cam = Vector3::new(
                (u as f64 - camera.cx) / camera.fx * d,
                (v as f64 - camera.cy) / camera.fy * d,
                d,
            );
            let world = camera.camera_to_world(&cam);
            out.positions.push([world.x, world.y, world.z]);
            out.colors.push(image[i]);
        }
    }
    if max_points > 0 && out.len() > max_points {
        let n = out.len();
        let keep: Vec<usize> = (0..max_points).map(|k| k * n / max_points).collect();
        out.positions = keep.iter().map(|&k| out.positions[k]).collect();
        out.colors = keep.iter().map(|&k| out.colors[k]).collect();
    }
    Ok(out)
}

/// Stencil for one axis: indices `(plus, minus)` and divisor, or `None` if
/// the axis has a single sample.
fn stencil(i: usize, n: usize) -> Option<(usize, usize, f64)> {
    if n < 2 {
        None
    } else if i == 0 {
        Some((1, 0, 1.0))
    } else if i == n - 1 {
        Some((n - 1, n - 2, 1.0))
    } else {
        Some((i + 1, i - 1, 2.0))
    }
}

/// Finite-difference gradients `(G^W, G^H)` of a row-major map. Central in
/// the interior, one-sided at borders; zero wherever the centre pixel or
/// any stencil pixel is invalid.
pub fn gradients(
    width: usize,
    height: usize,
    values: &[f64],
    valid: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; width * height];
    let mut gh = vec![0.0; width * height];
    for_each_stencil(width, height, valid, |i, axis, p, m, div| {
        let g = (values[p] - values[m]) / div;
        if axis == 0 {
            gw[i] = g;
        } else {
            gh[i] = g;
        }
    });
    (gw, gh)
}

/// Adjoint of [`gradients`].
pub fn gradients_backward(
    width: usize,
    height: usize,
    valid: &[bool],
    d_gw: &[f64],
    d_gh: &[f64],
) -> Vec<f64> {
    let mut d = vec![0.0; width * height];
    for_each_stencil(width, height, valid, |i, axis, p, m, div| {
        let g = if axis == 0 { d_gw[i] } else { d_gh[i] } / div;
        d[p] += g;
        d[m] -= g;
    });
    d
}

fn for_each_stencil(
    width: usize,
    height: usize,
    valid: &[bool],
    mut f: impl FnMut(usize, usize, usize, usize, f64),
) {
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            if !valid[i] {
                continue;
            }
            if let Some((p, m, div)) = stencil(u, width) {
                let (p, m) = (v * width + p, v * width + m);
                if valid[p] && valid[m] {
                    f(i, 0, p, m, div);
                }
            }
            if let Some((p, m, div)) = stencil(v, height) {
                let (p, m) = (p * width + u, m * width + u);
                if valid[p] && valid[m] {
                    f(i, 1, p, m, div);
                }
            }
        }
    }
}

/// Gradients of a depth map.
pub fn depth_gradients(depth: &DepthMap) -> (Vec<f64>, Vec<f64>) {
    gradients(depth.width, depth.height, &depth.values, &depth.valid)
}

/// `(G^W, G^H, 1) / ‖(G^W, G^H, 1)‖` per pixel.
pub fn pseudo_normal_map(gw: &[f64], gh: &[f64]) -> Vec<[f64; 3]> {
    gw.iter()
        .zip(gh)
        .map(|(&a, &b)| {
            let inv = 1.0 / (a * a + b * b + 1.0).sqrt();
            [a * inv, b * inv, inv]
        })
        .collect()
}

/// Result of min-max normalization over the valid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    /// Fewer than two distinct valid values; `values` is all zeros.
    pub degenerate: bool,
    argmin: usize,
    argmax: usize,
}

/// `(x − min) / (max − min)` on valid pixels, 0 elsewhere.
pub fn normalize_map(values: &[f64], mask: &[bool]) -> Normalized {
    let mut argmin = usize::MAX;
    let mut argmax = usize::MAX;
    for (i, &x) in values.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        if argmin == usize::MAX || x < values[argmin] {
            argmin = i;
        }
        if argmax == usize::MAX || x > values[argmax] {
            argmax = i;
        }
    }
    let degenerate = argmin == usize::MAX || !(values[argmax] > values[argmin]);
    let out = if degenerate {
        vec![0.0; values.len()]
    } else {
        let (lo, hi) = (values[argmin], values[argmax]);
        let range = hi - lo;
        values
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { (x - lo) / range } else { 0.0 })
            .collect()
    };
    Normalized {
        values: out,
        degenerate,
        argmin,
        argmax,
    }
}

impl Normalized {
    /// Gradient with respect to the input map, routing the min and max
    /// terms through the selected extreme pixels.
    pub fn backward(&self, input: &[f64], mask: &[bool], d_out: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; input.len()];
        if self.degenerate {
            return d;
        }
        let (lo, hi) = (input[self.argmin], input[self.argmax]);
        let range = hi - lo;
        let (mut d_lo, mut d_hi) = (0.0, 0.0);
        for i in 0..input.len() {
            if !mask[i] || d_out[i] == 0.0 {
                continue;
            }
            let g = d_out[i];
            d[i] += g / range;
            d_lo += g * (input[i] - hi) / (range * range);
            d_hi -= g * (input[i] - lo) / (range * range);
        }
        d[self.argmin] += d_lo;
        d[self.argmax] += d_hi;
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> DepthMap {
        let values = (0..height)
            .flat_map(|v| (0..width).map(move |u| (u, v)))
            .map(|(u, v)| f(u, v))
            .collect();
        DepthMap::from_metric(width, height, values).unwrap()
    }

    #[test]
    fn inverse_depth_examples() {
        let d = recover_metric_depth(3, 1, &[1000.0, 500.0, 0.0], 1000.0).unwrap();
        assert_eq!(d.values[0], 1.0);
        assert_eq!(d.values[1], 2.0);
        assert!(!d.valid[2]);
        assert!(recover_metric_depth(1, 1, &[1.0], 0.0).is_err());
        assert!(recover_metric_depth(2, 1, &[1.0], 1.0).is_err());
    }

    #[test]
    fn backproject_pinhole_rays() {
        let cam = Camera::looking_down_z(10.0, 10.0, 2.0, 3.0, 16, 8);
        let d = map(16, 8, |_, _| 4.0);
        let image = vec![[0.2, 0.4, 0.6]; 128];
        let mut mask = vec![true; 128];
        mask[3 * 16 + 12] = false;
        let pts = backproject(&image, &d, &mask, &cam, 1, 0).unwrap();
        assert_eq!(pts.len(), 127);
        // pixel (cx, cy) lies on the optical axis
        assert_eq!(pts.positions[3 * 16 + 2], [0.0, 0.0, 4.0]);
        // pixel (cx + fx, cy) sits at x = d
        let cam = Camera::looking_down_z(1.0, 1.0, 2.0, 3.0, 16, 8);
        let pts = backproject(&image, &d, &vec![true; 128], &cam, 1, 0).unwrap();
        let p = pts.positions[3 * 16 + 3];
        assert!((p[0] - 4.0).abs() < 1e-12 && p[1] == 0.0 && p[2] == 4.0);
        assert_eq!(pts.colors[0], [0.2, 0.4, 0.6]);
    }

    #[test]
    fn backproject_stride_and_cap() {
        let cam = Camera::looking_down_z(10.0, 10.0, 8.0, 8.0, 16, 16);
        let d = map(16, 16, |_, _| 1.0);
        let image = vec![[0.0; 3]; 256];
        let mask = vec![true; 256];
        assert_eq!(
            backproject(&image, &d, &mask, &cam, 2, 0).unwrap().len(),
            64
        );
        assert_eq!(
            backproject(&image, &d, &mask, &cam, 4, 0).unwrap().len(),
            16
        );
        assert_eq!(
            backproject(&image, &d, &mask, &cam, 1, 10).unwrap().len(),
            10
        );
        assert!(backproject(&image, &d, &vec![false; 256], &cam, 1, 0)
            .unwrap()
            .is_empty());
        assert!(backproject(&image, &d, &mask, &cam, 0, 0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let (gw, gh) = depth_gradients(&map(6, 5, |_, _| 3.0));
        assert!(gw.iter().chain(&gh).all(|&g| g == 0.0));
        let (gw, gh) = depth_gradients(&map(6, 5, |u, _| 1.0 + u as f64));
        assert!(gw.iter().all(|&g| g == 1.0));
        assert!(gh.iter().all(|&g| g == 0.0));
        let (gw, _) = depth_gradients(&map(6, 5, |u, _| 1.0 + (u * u) as f64));
        for v in 0..5 {
            for u in 1..5 {
                assert_eq!(gw[v * 6 + u], 2.0 * u as f64);
            }
        }
    }

    #[test]
    fn gradients_stop_at_invalid_pixels() {
        let mut d = map(5, 1, |u, _| 1.0 + u as f64);
        d.valid[2] = false;
        let (gw, _) = depth_gradients(&d);
        assert_eq!(gw, vec![1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gradients_backward_is_adjoint() {
        let (w, h) = (5, 4);
        let valid: Vec<bool> = (0..w * h).map(|i| i % 7 != 3).collect();
        let x: Vec<f64> = (0..w * h).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let a: Vec<f64> = (0..w * h).map(|i| ((i * 13) % 5) as f64 - 2.0).collect();
        let b: Vec<f64> = (0..w * h).map(|i| ((i * 7) % 3) as f64 - 1.0).collect();
        let (gw, gh) = gradients(w, h, &x, &valid);
        let lhs: f64 = gw
            .iter()
            .zip(&a)
            .chain(gh.iter().zip(&b))
            .map(|(p, q)| p * q)
            .sum();
        let adj = gradients_backward(w, h, &valid, &a, &b);
        let rhs: f64 = adj.iter().zip(&x).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pseudo_normal_examples() {
        let n = pseudo_normal_map(&[0.0, 1.0], &[0.0, 0.0]);
        assert_eq!(n[0], [0.0, 0.0, 1.0]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((n[1][0] - s).abs() < 1e-12 && n[1][1] == 0.0 && (n[1][2] - s).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let m = [true; 3];
        assert_eq!(
            normalize_map(&[2.0, 4.0, 6.0], &m).values,
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            normalize_map(&[0.0, 0.25, 1.0], &m).values,
            vec![0.0, 0.25, 1.0]
        );
        let c = normalize_map(&[3.0; 3], &m);
        assert!(c.degenerate && c.values.iter().all(|&v| v == 0.0));
        let partial = normalize_map(&[2.0, 100.0, 6.0], &[true, false, true]);
        assert_eq!(partial.values, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = [0.3, 1.7, 0.9, 2.4, 1.1, 0.2];
        let mask = [true, true, false, true, true, true];
        let w = [0.5, -1.0, 3.0, 0.25, 2.0, -0.7];
        let f = |x: &[f64]| -> f64 {
            normalize_map(x, &mask)
                .values
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let n = normalize_map(&x, &mask);
        let g = n.backward(&x, &mask, &w);
        for i in 0..x.len() {
            let mut p = x;
            p[i] += 1e-6;
            let mut m = x;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn pseudo_normals_are_unit(a in -1e3f64..1e3, b in -1e3f64..1e3) {
            let n = pseudo_normal_map(&[a], &[b])[0];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn normalize_is_affine_invariant_and_idempotent(
            xs in prop::collection::vec(-10.0f64..10.0, 3..40),
            a in 0.01f64..100.0,
            b in -50.0f64..50.0,
        ) {
            let mask = vec![true; xs.len()];
            let n = normalize_map(&xs, &mask);
            prop_assume!(!n.degenerate);
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let m = normalize_map(&ys, &mask);
            for (p, q) in n.values.iter().zip(&m.values) {
                prop_assert!((p - q).abs() < 1e-9);
            }
            let again = normalize_map(&n.values, &mask);
            for (p, q) in n.values.iter().zip(&again.values) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
