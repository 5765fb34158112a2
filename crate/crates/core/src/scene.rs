//! Canonical Gaussian cloud, pinhole camera, and the per-Gaussian geometry
//! helpers (covariance, quaternion rotation, shortest-axis normal).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Quaternions are stored as `[w, x, y, z]`.
pub fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    q.map(|v| v / n)
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_rotation(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a loss with respect to the (unit) quaternion components,
/// given the gradient with respect to the rotation matrix.
pub fn quat_to_rotation_backward(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)])
        - 4.0 * x * (g[(1, 1)] + g[(2, 2)]);
    let dy = 2.0
        * (x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)])
        - 4.0 * y * (g[(0, 0)] + g[(2, 2)]);
    let dz = 2.0
        * (-w * g[(0, 1)]
            + x * g[(0, 2)]
            + w * g[(1, 0)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)])
        - 4.0 * z * (g[(0, 0)] + g[(1, 1)]);
    [dw, dx, dy, dz]
}

/// Pulls a gradient on `q / |q|` back onto the raw quaternion `q`.
pub fn quat_normalize_backward(raw: [f64; 4], d_unit: [f64; 4]) -> [f64; 4] {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return [0.0; 4];
    }
    let u = raw.map(|v| v / n);
    let dot: f64 = (0..4).map(|i| u[i] * d_unit[i]).sum();
    std::array::from_fn(|i| (d_unit[i] - u[i] * dot) / n)
}

/// `R S Sᵀ Rᵀ` for a unit quaternion and positive per-axis scale.
pub fn build_covariance(rotation: [f64; 4], scale: Vector3<f64>) -> Matrix3<f64> {
    let m = quat_to_rotation(rotation) * Matrix3::from_diagonal(&scale);
    m * m.transpose()
}

/// Index of the smallest scale; ties resolve to the lowest index.
pub fn shortest_axis(scale: &Vector3<f64>) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if scale[i] < scale[best] {
            best = i;
        }
    }
    best
}

/// The rotation column belonging to the shortest scale axis.
pub fn shortest_axis_normal(rotation: [f64; 4], scale: Vector3<f64>) -> Vector3<f64> {
    quat_to_rotation(rotation)
        .column(shortest_axis(&scale))
        .into_owned()
}

/// Flips `normal` so that it faces `viewpoint` from `position`.
pub fn orient_towards(
    normal: Vector3<f64>,
    position: &Vector3<f64>,
    viewpoint: &Vector3<f64>,
) -> (Vector3<f64>, f64) {
    if normal.dot(&(viewpoint - position)) < 0.0 {
        (-normal, -1.0)
    } else {
        (normal, 1.0)
    }
}

/// Pinhole camera with a world-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 1.0e4;

impl Camera {
    /// Camera at the world origin looking down +z.
    pub fn looking_down_z(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width,
            height,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.near < self.far) || self.near <= 0.0 {
            return Err(Error::Config("camera requires 0 < near < far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera image size must be nonzero".into()));
        }
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(Error::Config("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn to_spec(&self) -> CameraSpec {
        let r = &self.rotation;
        let t = &self.translation;
        CameraSpec {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_camera: Some([
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                t.x,
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                t.y,
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
                t.z,
                0.0,
                0.0,
                0.0,
                1.0,
            ]),
            near: Some(self.near),
            far: Some(self.far),
        }
    }
}

/// Serialized camera: intrinsics, image size, and an optional row-major
/// 4×4 world-to-camera matrix (identity when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world_to_camera: Option<[f64; 16]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
}

impl TryFrom<&CameraSpec> for Camera {
    type Error = Error;

    fn try_from(spec: &CameraSpec) -> Result<Self> {
        let m = spec.world_to_camera.unwrap_or([
            1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ]);
        let cam = Camera {
            fx: spec.fx,
            fy: spec.fy,
            cx: spec.cx,
            cy: spec.cy,
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
            width: spec.width,
            height: spec.height,
            near: spec.near.unwrap_or(DEFAULT_NEAR),
            far: spec.far.unwrap_or(DEFAULT_FAR),
        };
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::Config(
                "world_to_camera bottom row must be [0, 0, 0, 1]".into(),
            ));
        }
        cam.validate()?;
        Ok(cam)
    }
}

/// One Gaussian's raw (pre-activation) parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub sh: Vec<f64>,
}

/// Learnable canonical scene, stored as structure-of-arrays in raw
/// parameter space. Activations: `exp` for scale, `sigmoid` for opacity,
/// normalization for the quaternion.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    /// `len() * sh_stride()` values, band-major per Gaussian.
    pub sh_coeffs: Vec<f64>,
    /// Active degree used for rendering.
    pub sh_degree: usize,
    max_sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(max_sh_degree: usize) -> Self {
        assert!(max_sh_degree <= sh::MAX_SH_DEGREE);
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
            sh_degree: 0,
            max_sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn max_sh_degree(&self) -> usize {
        self.max_sh_degree
    }

    /// Number of SH values per Gaussian (bands × 3 channels).
    pub fn sh_stride(&self) -> usize {
        sh::num_bands(self.max_sh_degree) * 3
    }

    pub fn push(&mut self, g: GaussianParams) {
        assert_eq!(g.sh.len(), self.sh_stride(), "sh length mismatch");
        self.positions.push(g.position);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        self.sh_coeffs.extend_from_slice(&g.sh);
    }

    pub fn get(&self, i: usize) -> GaussianParams {
        GaussianParams {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            sh: self.sh(i).to_vec(),
        }
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh_coeffs[i * s..(i + 1) * s]
    }

    pub fn sh_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.sh_stride();
        &mut self.sh_coeffs[i * s..(i + 1) * s]
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.log_scales[i].map(f64::exp))
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn unit_rotation(&self, i: usize) -> [f64; 4] {
        quat_normalize(self.rotations[i])
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        build_covariance(self.unit_rotation(i), self.scale(i))
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = quat_normalize(*q);
        }
    }

    /// Keeps the Gaussians for which `keep[i]` is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let stride = self.sh_stride();
        let mut sh = Vec::with_capacity(self.sh_coeffs.len());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                sh.extend_from_slice(&self.sh_coeffs[i * stride..(i + 1) * stride]);
            }
        }
        self.sh_coeffs = sh;
        let mut it = keep.iter();
        self.positions.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.rotations.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.log_scales.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.opacity_logits.retain(|_| *it.next().unwrap());
    }

    /// Checks buffer lengths and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.sh_coeffs.len() != n * self.sh_stride()
        {
            return Err(Error::Shape(
                "gaussian cloud buffers disagree in length".into(),
            ));
        }
        if self.sh_degree > self.max_sh_degree {
            return Err(Error::Shape("active sh degree exceeds maximum".into()));
        }
        let finite = self.positions.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.sh_coeffs.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Shape(
                "gaussian cloud contains non-finite values".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rot_z_90() -> [f64; 4] {
        let h = std::f64::consts::FRAC_PI_4;
        [h.cos(), 0.0, 0.0, h.sin()]
    }

    /// Explicit triple loop, independent of nalgebra's products.
    fn covariance_oracle(r: &Matrix3<f64>, s: [f64; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += r[(i, k)] * s[k] * s[k] * r[(j, k)];
                }
            }
        }
        out
    }

    #[test]
    fn covariance_diagonal_case() {
        let c = build_covariance([1.0, 0.0, 0.0, 0.0], Vector3::new(1.0, 2.0, 3.0));
        assert_relative_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn covariance_rotated_about_z() {
        let q = rot_z_90();
        let c = build_covariance(q, Vector3::new(2.0, 1.0, 1.0));
        let oracle = covariance_oracle(&quat_to_rotation(q), [2.0, 1.0, 1.0]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[(i, j)] - oracle[i][j]).abs() < 1e-12);
            }
        }
        assert_relative_eq!(
            c,
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn shortest_axis_examples() {
        let id = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(
            shortest_axis_normal(id, Vector3::new(3.0, 1.0, 2.0)),
            Vector3::new(0.0, 1.0, 0.0)
        );
        assert_eq!(
            shortest_axis_normal(id, Vector3::new(1.0, 1.0, 2.0)),
            Vector3::new(1.0, 0.0, 0.0)
        );
        let n = shortest_axis_normal(rot_z_90(), Vector3::new(2.0, 2.0, 1.0));
        assert_relative_eq!(n, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn orientation_faces_viewpoint() {
        let (n, s) = orient_towards(
            Vector3::z(),
            &Vector3::new(0.0, 0.0, 5.0),
            &Vector3::zeros(),
        );
        assert_eq!(n, -Vector3::z());
        assert_eq!(s, -1.0);
    }

    #[test]
    fn camera_spec_round_trip() {
        let mut cam = Camera::looking_down_z(10.0, 11.0, 4.0, 5.0, 8, 9);
        cam.rotation = quat_to_rotation(rot_z_90());
        cam.translation = Vector3::new(0.1, 0.2, 0.3);
        let back = Camera::try_from(&cam.to_spec()).unwrap();
        assert_eq!(back, cam);
        let p = Vector3::new(1.0, -2.0, 3.0);
        assert_relative_eq!(
            cam.camera_to_world(&cam.world_to_camera(&p)),
            p,
            epsilon = 1e-12
        );
    }

    #[test]
    fn camera_rejects_bad_intrinsics() {
        let mut cam = Camera::looking_down_z(10.0, 10.0, 4.0, 4.0, 8, 8);
        cam.fx = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = Camera::looking_down_z(10.0, 10.0, 4.0, 4.0, 8, 8);
        cam.near = 5.0;
        cam.far = 1.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn quaternion_gradients_match_finite_differences() {
        let raw = [0.9, -0.3, 0.4, 0.2];
        let weights = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 0.9, 0.2, -0.6);
        let f = |q: [f64; 4]| {
            quat_to_rotation(quat_normalize(q))
                .component_mul(&weights)
                .sum()
        };
        let unit = quat_normalize(raw);
        let analytic = quat_normalize_backward(raw, quat_to_rotation_backward(unit, &weights));
        for i in 0..4 {
            let (mut p, mut m) = (raw, raw);
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(p) - f(m)) / 2e-6;
            assert!(
                (fd - analytic[i]).abs() < 1e-8,
                "component {i}: {fd} vs {}",
                analytic[i]
            );
        }
    }

    fn arb_quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("nonzero", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
    }

    proptest! {
        #[test]
        fn quaternions_normalize_to_unit(q in arb_quat()) {
            let u = quat_normalize(q);
            let n: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }

        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            q in arb_quat(),
            s in prop::array::uniform3(0.1f64..3.0),
        ) {
            let c = build_covariance(quat_normalize(q), Vector3::from(s));
            prop_assert!((c - c.transpose()).abs().max() < 1e-12);
            let mut eig: Vec<f64> = c.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut sq: Vec<f64> = s.iter().map(|v| v * v).collect();
            sq.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&sq) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn isotropic_scale_is_rotation_invariant(q in arb_quat()) {
            let c = build_covariance(quat_normalize(q), Vector3::new(1.0, 1.0, 1.0));
            prop_assert!((c - Matrix3::identity()).abs().max() < 1e-12);
        }

        #[test]
        fn argmin_invariant_under_uniform_scaling(
            s in prop::array::uniform3(0.1f64..3.0),
            k in 0.01f64..100.0,
        ) {
            let v = Vector3::from(s);
            prop_assert_eq!(shortest_axis(&v), shortest_axis(&(v * k)));
        }

        #[test]
        fn normal_invariant_under_axis_permutation(
            q in arb_quat(),
            s in prop::array::uniform3(0.1f64..3.0),
            perm in Just([2usize, 0, 1]),
        ) {
            let r = quat_to_rotation(quat_normalize(q));
            let n = r.column(shortest_axis(&Vector3::from(s))).into_owned();
            let mut rp = Matrix3::zeros();
            let mut sp = Vector3::zeros();
            for (dst, &src) in perm.iter().enumerate() {
                rp.set_column(dst, &r.column(src));
                sp[dst] = s[src];
            }
            let np = rp.column(shortest_axis(&sp)).into_owned();
            prop_assert!((n - np).norm() < 1e-12);
        }
    }
}
