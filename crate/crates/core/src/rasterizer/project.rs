use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::RenderSettings;
use crate::scene::{
    orient_towards, quat_normalize, quat_normalize_backward, quat_to_rotation,
    quat_to_rotation_backward, shortest_axis, Camera, GaussianCloud,
};
use crate::sh;

/// A Gaussian mapped into the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel-space mean.
    pub mean: [f64; 2],
    /// Screen covariance `[a, b, c]` of `[[a, b], [b, c]]`, low-pass included.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same layout.
    pub conic: [f64; 3],
    /// Camera-space z of the center.
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Camera-facing shortest-axis normal in the render frame.
    pub normal: [f64; 3],
    /// Half-size of the square support (3σ along the major axis).
    pub radius: f64,
    /// Inclusive pixel rectangle `[u0, u1, v0, v1]` that may be touched.
    pub rect: [usize; 4],
}

/// Maps a camera-space vector into the normal-map frame: x right, y down,
/// z toward the viewer.
fn to_render_frame(v: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.x, v.y, -v.z)
}

pub(crate) struct CameraView<'a> {
    pub camera: &'a Camera,
    pub center: Vector3<f64>,
}

impl<'a> CameraView<'a> {
    pub fn new(camera: &'a Camera) -> Self {
        Self {
            camera,
            center: camera.center(),
        }
    }
}

fn jacobian(cam: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * y * iz2,
    )
}

/// Screen-space covariance (without low-pass) for a camera-space mean and a
/// world-space covariance.
pub fn screen_covariance(
    camera: &Camera,
    mean_cam: &Vector3<f64>,
    cov_world: &Matrix3<f64>,
) -> Matrix2<f64> {
    let t = jacobian(camera, mean_cam) * camera.rotation;
    t * cov_world * t.transpose()
}

pub(crate) fn project_one(
    cloud: &GaussianCloud,
    i: usize,
    view: &CameraView,
    settings: &RenderSettings,
) -> Option<ProjectedGaussian> {
    let cam = view.camera;
    let p = cloud.position(i);
    let pc = cam.world_to_camera(&p);
    if pc.z <= cam.near || pc.z >= cam.far {
        return None;
    }
    let q = quat_normalize(cloud.rotations[i]);
    let scale = cloud.scale(i);
    let r = quat_to_rotation(q);
    let m = r * Matrix3::from_diagonal(&scale);
    let cov3 = m * m.transpose();
    let cov2 = screen_covariance(cam, &pc, &cov3);
    let a = cov2[(0, 0)] + settings.low_pass;
    let b = cov2[(0, 1)];
    let c = cov2[(1, 1)] + settings.low_pass;
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let inv_det = 1.0 / det;
    let conic = [c * inv_det, -b * inv_det, a * inv_det];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();

    let mx = cam.fx * pc.x / pc.z + cam.cx;
    let my = cam.fy * pc.y / pc.z + cam.cy;
    // conservative integer rectangle; the per-pixel box test is exact
    let u0 = (mx - radius).floor();
    let u1 = (mx + radius).ceil();
    let v0 = (my - radius).floor();
    let v1 = (my + radius).ceil();
    let (w, h) = (cam.width as f64, cam.height as f64);
    if !(u1 >= 0.0 && v1 >= 0.0 && u0 <= w - 1.0 && v0 <= h - 1.0) {
        return None;
    }
    let rect = [
        u0.max(0.0) as usize,
        u1.min(w - 1.0) as usize,
        v0.max(0.0) as usize,
        v1.min(h - 1.0) as usize,
    ];

    let dir = (p - view.center).normalize();
    let color = sh::eval_sh(cloud.sh(i), &dir, cloud.sh_degree);
    let axis = r.column(shortest_axis(&scale)).into_owned();
    let (n_world, _) = orient_towards(axis, &p, &view.center);
    let normal = to_render_frame(cam.rotation * n_world);

    Some(ProjectedGaussian {
        mean: [mx, my],
        cov: [a, b, c],
        conic,
        depth: pc.z,
        opacity: cloud.opacity(i),
        color,
        normal: normal.into(),
        radius,
        rect,
    })
}

/// Gradient of the loss with respect to one projected Gaussian's
/// screen-space quantities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    pub normal: [f64; 3],
}

impl SplatGrad {
    pub fn add_assign(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
            self.normal[k] += o.normal[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

/// Per-Gaussian raw-parameter gradients from one projected Gaussian.
pub(crate) struct ParamGrad {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
}

/// Chains screen-space gradients back to the raw parameters of Gaussian
/// `i`. SH gradients are accumulated into `d_sh`.
pub(crate) fn project_backward(
    cloud: &GaussianCloud,
    i: usize,
    view: &CameraView,
    settings: &RenderSettings,
    g: &SplatGrad,
    d_sh: &mut [f64],
) -> ParamGrad {
    let cam = view.camera;
    let w_rot = cam.rotation;
    let p = cloud.position(i);
    let pc = cam.world_to_camera(&p);
    let raw_q = cloud.rotations[i];
    let q = quat_normalize(raw_q);
    let scale = cloud.scale(i);
    let r = quat_to_rotation(q);
    let m = r * Matrix3::from_diagonal(&scale);
    let cov3 = m * m.transpose();
    let jac = jacobian(cam, &pc);
    let t = jac * w_rot;
    let cov2 = t * cov3 * t.transpose();
    let a = cov2[(0, 0)] + settings.low_pass;
    let b = cov2[(0, 1)];
    let c = cov2[(1, 1)] + settings.low_pass;
    let det = a * c - b * b;
    let conic = Matrix2::new(c, -b, -b, a) / det;

    let mut d_pc = Vector3::<f64>::zeros();

    // mean2d = (fx x/z + cx, fy y/z + cy)
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    d_pc.x += g.mean[0] * cam.fx * iz;
    d_pc.y += g.mean[1] * cam.fy * iz;
    d_pc.z += -g.mean[0] * cam.fx * x * iz2 - g.mean[1] * cam.fy * y * iz2;
    d_pc.z += g.depth;

    // conic = inverse(cov2 + low-pass)
    let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let g_cov2 = -(conic * g_conic * conic);
    // cov2 = T Σ Tᵀ
    let g_cov3 = t.transpose() * g_cov2 * t;
    let g_t = 2.0 * g_cov2 * t * cov3;
    let g_j = g_t * w_rot.transpose();
    let iz3 = iz2 * iz;
    d_pc.x += g_j[(0, 2)] * (-cam.fx * iz2);
    d_pc.y += g_j[(1, 2)] * (-cam.fy * iz2);
    d_pc.z += g_j[(0, 0)] * (-cam.fx * iz2)
        + g_j[(0, 2)] * (2.0 * cam.fx * x * iz3)
        + g_j[(1, 1)] * (-cam.fy * iz2)
        + g_j[(1, 2)] * (2.0 * cam.fy * y * iz3);

    // Σ = M Mᵀ with M = R diag(s)
    let g_m = 2.0 * g_cov3 * m;
    let mut g_r = Matrix3::<f64>::zeros();
    let mut d_scale = Vector3::<f64>::zeros();
    for k in 0..3 {
        for row in 0..3 {
            g_r[(row, k)] += g_m[(row, k)] * scale[k];
            d_scale[k] += g_m[(row, k)] * r[(row, k)];
        }
    }

    // normal = F Wrot (sign * R[:, axis])
    let axis_idx = shortest_axis(&scale);
    let axis = r.column(axis_idx).into_owned();
    let (_, sign) = orient_towards(axis, &p, &view.center);
    let g_n_render = Vector3::from(g.normal);
    let g_n_cam = Vector3::new(g_n_render.x, g_n_render.y, -g_n_render.z);
    let g_axis = sign * (w_rot.transpose() * g_n_cam);
    for row in 0..3 {
        g_r[(row, axis_idx)] += g_axis[row];
    }

    let d_q_unit = quat_to_rotation_backward(q, &g_r);
    let d_q = quat_normalize_backward(raw_q, d_q_unit);

    // color = sh(dir), dir = normalize(p - center)
    let v = p - view.center;
    let len = v.norm();
    let dir = v / len;
    let d_dir = sh::eval_sh_backward(cloud.sh(i), &dir, cloud.sh_degree, g.color, d_sh);
    let d_p_color = (d_dir - dir * dir.dot(&d_dir)) / len;

    let d_p = w_rot.transpose() * d_pc + d_p_color;

    let o = cloud.opacity(i);
    ParamGrad {
        position: d_p.into(),
        rotation: d_q,
        log_scale: [
            d_scale[0] * scale[0],
            d_scale[1] * scale[1],
            d_scale[2] * scale[2],
        ],
        opacity_logit: g.opacity * o * (1.0 - o),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GaussianParams;

    fn single(pos: [f64; 3], log_scale: [f64; 3]) -> GaussianCloud {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(GaussianParams {
            position: pos,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale,
            opacity_logit: 0.0,
            sh: vec![0.0; 3],
        });
        cloud
    }

    #[test]
    fn optical_axis_covariance() {
        let sigma: f64 = 0.2;
        let cloud = single([0.0, 0.0, 1.0], [sigma.ln(); 3]);
        let cam = Camera::looking_down_z(1.0, 1.0, 0.0, 0.0, 1, 1);
        let s = RenderSettings::default();
        let p = project_one(&cloud, 0, &CameraView::new(&cam), &s).unwrap();
        let expected = sigma * sigma + 0.3;
        assert!((p.cov[0] - expected).abs() < 1e-12);
        assert!(p.cov[1].abs() < 1e-12);
        assert!((p.cov[2] - expected).abs() < 1e-12);
        assert_eq!(p.depth, 1.0);
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let cloud = single([0.0, 0.0, 0.005], [-2.0; 3]);
        let cam = Camera::looking_down_z(10.0, 10.0, 4.0, 4.0, 8, 8);
        let s = RenderSettings::default();
        assert!(project_one(&cloud, 0, &CameraView::new(&cam), &s).is_none());
        let cloud = single([0.0, 0.0, -1.0], [-2.0; 3]);
        assert!(project_one(&cloud, 0, &CameraView::new(&cam), &s).is_none());
    }

    #[test]
    fn doubling_focal_length_quadruples_x_extent() {
        let cloud = single([0.1, 0.0, 2.0], [-1.0, -1.5, -2.0]);
        let c1 = Camera::looking_down_z(10.0, 10.0, 0.0, 0.0, 64, 64);
        let mut c2 = c1.clone();
        c2.fx = 20.0;
        let s = RenderSettings {
            low_pass: 0.0,
            ..RenderSettings::default()
        };
        let p1 = project_one(&cloud, 0, &CameraView::new(&c1), &s).unwrap();
        let p2 = project_one(&cloud, 0, &CameraView::new(&c2), &s).unwrap();
        assert!((p2.cov[0] / p1.cov[0] - 4.0).abs() < 1e-12);
        assert!((p2.cov[2] / p1.cov[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outside_image_is_culled() {
        let cloud = single([50.0, 0.0, 2.0], [-3.0; 3]);
        let cam = Camera::looking_down_z(10.0, 10.0, 4.0, 4.0, 8, 8);
        let s = RenderSettings::default();
        assert!(project_one(&cloud, 0, &CameraView::new(&cam), &s).is_none());
    }
}
