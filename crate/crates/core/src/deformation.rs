//! HexPlane deformation field.
//!
//! A position/time query is mapped into six 2D feature planes per level,
//! `(x,y) (x,z) (y,z) (x,t) (y,t) (z,t)`, each sampled bilinearly. The six
//! samples are fused by elementwise product, levels are concatenated, and a
//! small MLP produces the shared feature `f_d`. Five heads decode `f_d` into
//! additive deltas for position, rotation, log-scale, opacity logit and SH.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::CloudGradients;
use crate::scene::GaussianCloud;
use crate::sh;

/// Coordinate pairs of the six planes; index 3 is time.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

const CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationConfig {
    /// Grid vertices along x, y, z, t at the coarsest level.
    pub resolution: [usize; 4],
    /// Each level doubles the spatial resolution; time stays fixed.
    pub levels: usize,
    pub features: usize,
    pub hidden: usize,
    /// Initial range of the purely spatial planes; time planes start at 1.
    pub init_range: [f64; 2],
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            resolution: [64, 64, 64, 75],
            levels: 2,
            features: 8,
            hidden: 64,
            init_range: [0.1, 0.5],
        }
    }
}

/// Axis-aligned box mapping world positions to `[0,1]³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn from_points(points: &[[f64; 3]], margin: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySelection("bounding box"));
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        for a in 0..3 {
            let pad = margin * (max[a] - min[a]).max(1e-2);
            min[a] -= pad;
            max[a] += pad;
        }
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.max[a] - self.min[a] > 0.0) {
                return Err(Error::Config("degenerate bounding box".into()));
            }
        }
        Ok(())
    }

    /// Normalized coordinate and its derivative (zero when clamped).
    fn normalize(&self, p: f64, axis: usize) -> (f64, f64) {
        let ext = self.max[axis] - self.min[axis];
        let u = (p - self.min[axis]) / ext;
        if u < 0.0 {
            (0.0, 0.0)
        } else if u > 1.0 {
            (1.0, 0.0)
        } else {
            (u, 1.0 / ext)
        }
    }
}

/// One 2D feature plane, `data[(j * res_a + i) * features + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub res_a: usize,
    pub res_b: usize,
    pub features: usize,
    pub data: Vec<f64>,
}

struct PlaneSample {
    offsets: [usize; 4],
    weights: [f64; 4],
    /// d weights / d grid coordinate a, b.
    dwa: [f64; 4],
    dwb: [f64; 4],
}

fn cell(coord: f64, res: usize) -> (usize, f64) {
    let x = coord * (res - 1) as f64;
    let i = (x.floor() as usize).min(res - 2);
    (i, x - i as f64)
}

impl Plane {
    fn locate(&self, ua: f64, ub: f64) -> PlaneSample {
        let (ia, fa) = cell(ua, self.res_a);
        let (ib, fb) = cell(ub, self.res_b);
        let f = self.features;
        let o = |i: usize, j: usize| (j * self.res_a + i) * f;
        PlaneSample {
            offsets: [o(ia, ib), o(ia + 1, ib), o(ia, ib + 1), o(ia + 1, ib + 1)],
            weights: [
                (1.0 - fa) * (1.0 - fb),
                fa * (1.0 - fb),
                (1.0 - fa) * fb,
                fa * fb,
            ],
            dwa: [-(1.0 - fb), 1.0 - fb, -fb, fb],
            dwb: [-(1.0 - fa), -fa, 1.0 - fa, fa],
        }
    }

    fn interpolate(&self, s: &PlaneSample, out: &mut [f64]) {
        for (k, v) in out.iter_mut().enumerate() {
            *v = (0..4)
                .map(|c| s.weights[c] * self.data[s.offsets[c] + k])
                .sum();
        }
    }

    /// Sum over adjacent pairs of squared differences, per axis.
    fn tv(&self) -> (f64, usize, f64, usize) {
        let f = self.features;
        let (mut sa, mut sb) = (0.0, 0.0);
        for j in 0..self.res_b {
            for i in 0..self.res_a {
                let o = (j * self.res_a + i) * f;
                for k in 0..f {
                    let v = self.data[o + k];
                    if i + 1 < self.res_a {
                        let d = self.data[o + f + k] - v;
                        sa += d * d;
                    }
                    if j + 1 < self.res_b {
                        let d = self.data[o + self.res_a * f + k] - v;
                        sb += d * d;
                    }
                }
            }
        }
        let na = (self.res_a - 1) * self.res_b * f;
        let nb = self.res_a * (self.res_b - 1) * f;
        (sa, na, sb, nb)
    }

    fn tv_backward(&self, scale: f64, grad: &mut [f64]) {
        let f = self.features;
        let na = (self.res_a - 1) * self.res_b * f;
        let nb = self.res_a * (self.res_b - 1) * f;
        let (ka, kb) = (2.0 * scale / na as f64, 2.0 * scale / nb as f64);
        for j in 0..self.res_b {
            for i in 0..self.res_a {
                let o = (j * self.res_a + i) * f;
                for k in 0..f {
                    let v = self.data[o + k];
                    if i + 1 < self.res_a {
                        let d = self.data[o + f + k] - v;
                        grad[o + f + k] += ka * d;
                        grad[o + k] -= ka * d;
                    }
                    if j + 1 < self.res_b {
                        let d = self.data[o + self.res_a * f + k] - v;
                        grad[o + self.res_a * f + k] += kb * d;
                        grad[o + k] -= kb * d;
                    }
                }
            }
        }
    }
}

/// Multi-resolution HexPlane feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HexPlaneGrid {
    pub bbox: Aabb,
    pub features: usize,
    /// `levels[l][p]` is plane `PLANE_AXES[p]` at level `l`.
    pub levels: Vec<[Plane; 6]>,
}

impl HexPlaneGrid {
    pub fn new(config: &DeformationConfig, bbox: Aabb, rng: &mut impl Rng) -> Self {
        let levels = (0..config.levels)
            .map(|l| {
                let res = level_resolution(config, l);
                std::array::from_fn(|p| {
                    let (a, b) = PLANE_AXES[p];
                    let n = res[a] * res[b] * config.features;
                    let data = if b == 3 {
                        vec![1.0; n]
                    } else {
                        (0..n)
                            .map(|_| rng.random_range(config.init_range[0]..config.init_range[1]))
                            .collect()
                    };
                    Plane {
                        res_a: res[a],
                        res_b: res[b],
                        features: config.features,
                        data,
                    }
                })
            })
            .collect();
        Self {
            bbox,
            features: config.features,
            levels,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.levels.len() * self.features
    }

    fn grid_coords(&self, p: &[f64; 3], t: f64) -> ([f64; 4], [f64; 4]) {
        let mut u = [0.0; 4];
        let mut du = [0.0; 4];
        for a in 0..3 {
            (u[a], du[a]) = self.bbox.normalize(p[a], a);
        }
        u[3] = t.clamp(0.0, 1.0);
        (u, du)
    }

    /// Fused per-level features concatenated across levels (the encoder
    /// output before the feature MLP).
    pub fn sample(&self, p: &[f64; 3], t: f64, out: &mut [f64]) {
        let (u, _) = self.grid_coords(p, t);
        let f = self.features;
        let mut tmp = vec![0.0; f];
        for (l, planes) in self.levels.iter().enumerate() {
            let dst = &mut out[l * f..(l + 1) * f];
            dst.fill(1.0);
            for (p_idx, plane) in planes.iter().enumerate() {
                let (a, b) = PLANE_AXES[p_idx];
                let s = plane.locate(u[a], u[b]);
                plane.interpolate(&s, &mut tmp);
                for k in 0..f {
                    dst[k] *= tmp[k];
                }
            }
        }
    }

    /// Backward of [`Self::sample`]. Plane gradients are added into `grads`
    /// (one buffer per plane in tensor order); returns the position
    /// gradient.
    fn sample_backward(
        &self,
        p: &[f64; 3],
        t: f64,
        d_out: &[f64],
        grads: &mut [Vec<f64>],
    ) -> [f64; 3] {
        let (u, du) = self.grid_coords(p, t);
        let f = self.features;
        let mut d_pos = [0.0; 3];
        let mut vals = vec![0.0; 6 * f];
        for (l, planes) in self.levels.iter().enumerate() {
            let samples: [PlaneSample; 6] = std::array::from_fn(|p_idx| {
                let (a, b) = PLANE_AXES[p_idx];
                planes[p_idx].locate(u[a], u[b])
            });
            for p_idx in 0..6 {
                planes[p_idx].interpolate(&samples[p_idx], &mut vals[p_idx * f..(p_idx + 1) * f]);
            }
            let g = &d_out[l * f..(l + 1) * f];
            for p_idx in 0..6 {
                let plane = &planes[p_idx];
                let s = &samples[p_idx];
                let (a, b) = PLANE_AXES[p_idx];
                let grad = &mut grads[l * 6 + p_idx];
                let (mut dca, mut dcb) = (0.0, 0.0);
                for k in 0..f {
                    let others: f64 = (0..6)
                        .filter(|&q| q != p_idx)
                        .map(|q| vals[q * f + k])
                        .product();
                    let gi = g[k] * others;
                    if gi == 0.0 {
                        continue;
                    }
                    for c in 0..4 {
                        grad[s.offsets[c] + k] += s.weights[c] * gi;
                        let v = plane.data[s.offsets[c] + k];
                        dca += gi * s.dwa[c] * v;
                        dcb += gi * s.dwb[c] * v;
                    }
                }
                if a < 3 {
                    d_pos[a] += dca * (plane.res_a - 1) as f64 * du[a];
                }
                if b < 3 {
                    d_pos[b] += dcb * (plane.res_b - 1) as f64 * du[b];
                }
            }
        }
        d_pos
    }

    /// Sum over levels and planes of the mean squared neighbor difference
    /// along each plane axis.
    pub fn tv_loss(&self) -> f64 {
        self.levels
            .iter()
            .flatten()
            .map(|plane| {
                let (sa, na, sb, nb) = plane.tv();
                sa / na as f64 + sb / nb as f64
            })
            .sum()
    }

    /// Adds `scale` times the gradient of [`Self::tv_loss`], one buffer per
    /// plane in tensor order.
    pub fn tv_backward(&self, scale: f64, grads: &mut [Vec<f64>]) {
        let planes: Vec<&Plane> = self.levels.iter().flatten().collect();
        grads
            .par_iter_mut()
            .zip(planes.par_iter())
            .for_each(|(g, plane)| plane.tv_backward(scale, g));
    }
}

fn level_resolution(config: &DeformationConfig, level: usize) -> [usize; 4] {
    let r = config.resolution;
    let k = 1 << level;
    [r[0] * k, r[1] * k, r[2] * k, r[3]]
}

/// Fully connected layer, `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: DMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-bound..bound)),
            bias: DVector::from_fn(outputs, |_, _| rng.random_range(-bound..bound)),
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weight * x;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        z
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn backward(&self, x: &DMatrix<f64>, dz: &DMatrix<f64>, g: &mut DenseGrad) -> DMatrix<f64> {
        g.weight += dz * x.transpose();
        for col in dz.column_iter() {
            g.bias += col;
        }
        self.weight.transpose() * dz
    }
}

#[derive(Debug, Clone)]
struct DenseGrad {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

impl DenseGrad {
    fn zeros_like(d: &Dense) -> Self {
        Self {
            weight: DMatrix::zeros(d.weight.nrows(), d.weight.ncols()),
            bias: DVector::zeros(d.bias.len()),
        }
    }
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

fn relu_mask(dz: &mut DMatrix<f64>, pre: &DMatrix<f64>) {
    dz.zip_apply(pre, |g, p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
}

/// Per-Gaussian additive deltas in raw parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct Deltas {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity: f64,
    pub sh: Vec<f64>,
}

/// Head output order: position, rotation, log-scale, opacity, SH.
pub const NUM_HEADS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub config: DeformationConfig,
    pub grid: HexPlaneGrid,
    /// Shared feature MLP: input → hidden (ReLU) → hidden.
    pub feature_mlp: [Dense; 2],
    /// Each head: ReLU → hidden (ReLU) → output.
    pub heads: [[Dense; 2]; NUM_HEADS],
    sh_stride: usize,
}

/// Gradients for every deformation tensor, in [`DeformationField::tensors`]
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationGradients {
    pub tensors: Vec<Vec<f64>>,
}

impl DeformationGradients {
    pub fn zeros_like(field: &DeformationField) -> Self {
        Self {
            tensors: field.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// Activations of one forward pass, consumed by the backward pass.
pub struct DeformTape {
    t: f64,
    n: usize,
    chunks: Vec<ChunkForward>,
}

struct ChunkForward {
    x0: DMatrix<f64>,
    z0: DMatrix<f64>,
    fd: DMatrix<f64>,
    rfd: DMatrix<f64>,
    head_pre: Vec<DMatrix<f64>>,
    head_hidden: Vec<DMatrix<f64>>,
    outputs: Vec<DMatrix<f64>>,
}

impl DeformationField {
    /// New field with zero-initialized head output layers, so the initial
    /// deformation is the identity.
    pub fn new(config: DeformationConfig, bbox: Aabb, max_sh_degree: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = HexPlaneGrid::new(&config, bbox, &mut rng);
        let h = config.hidden;
        let sh_stride = sh::num_bands(max_sh_degree) * 3;
        let feature_mlp = [
            Dense::new(grid.output_dim(), h, &mut rng),
            Dense::new(h, h, &mut rng),
        ];
        let outs = [3, 4, 3, 1, sh_stride];
        let heads = outs.map(|o| [Dense::new(h, h, &mut rng), Dense::zeros(h, o)]);
        Self {
            config,
            grid,
            feature_mlp,
            heads,
            sh_stride,
        }
    }

    pub fn sh_stride(&self) -> usize {
        self.sh_stride
    }

    /// Number of leading tensors in [`Self::tensors`] that are plane features.
    pub fn num_grid_tensors(&self) -> usize {
        self.grid.levels.len() * 6
    }

    /// All learnable tensors: planes (level-major), then the feature MLP,
    /// then the heads, each layer as weight followed by bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self
            .grid
            .levels
            .iter()
            .flatten()
            .map(|p| p.data.as_slice())
            .collect();
        for d in self.feature_mlp.iter().chain(self.heads.iter().flatten()) {
            v.push(d.weight.as_slice());
            v.push(d.bias.as_slice());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self
            .grid
            .levels
            .iter_mut()
            .flatten()
            .map(|p| p.data.as_mut_slice())
            .collect();
        for d in self
            .feature_mlp
            .iter_mut()
            .chain(self.heads.iter_mut().flatten())
        {
            v.push(d.weight.as_mut_slice());
            v.push(d.bias.as_mut_slice());
        }
        v
    }

    /// Tensor shapes in [`Self::tensors`] order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut v: Vec<Vec<usize>> = self
            .grid
            .levels
            .iter()
            .flatten()
            .map(|p| vec![p.res_b, p.res_a, p.features])
            .collect();
        for d in self.feature_mlp.iter().chain(self.heads.iter().flatten()) {
            v.push(vec![d.weight.nrows(), d.weight.ncols()]);
            v.push(vec![d.bias.len()]);
        }
        v
    }

    /// Encoder output `f_d` for one query.
    pub fn encode_spacetime(&self, position: [f64; 3], t: f64) -> Vec<f64> {
        let fwd = self.forward_chunk(&[position], t);
        fwd.fd.column(0).iter().copied().collect()
    }

    /// Decodes one feature vector into deltas.
    pub fn decode_deformation(&self, f_d: &[f64]) -> Deltas {
        let rfd = relu(&DMatrix::from_column_slice(f_d.len(), 1, f_d));
        let outs: Vec<DMatrix<f64>> = self
            .heads
            .iter()
            .map(|[l0, l1]| l1.forward(&relu(&l0.forward(&rfd))))
            .collect();
        deltas_at(&outs, 0)
    }

    fn forward_chunk(&self, positions: &[[f64; 3]], t: f64) -> ChunkForward {
        let dim = self.grid.output_dim();
        let mut x0 = DMatrix::zeros(dim, positions.len());
        for (j, p) in positions.iter().enumerate() {
            self.grid
                .sample(p, t, &mut x0.as_mut_slice()[j * dim..(j + 1) * dim]);
        }
        let z0 = self.feature_mlp[0].forward(&x0);
        let fd = self.feature_mlp[1].forward(&relu(&z0));
        let rfd = relu(&fd);
        let mut head_pre = Vec::with_capacity(NUM_HEADS);
        let mut head_hidden = Vec::with_capacity(NUM_HEADS);
        let mut outputs = Vec::with_capacity(NUM_HEADS);
        for [l0, l1] in &self.heads {
            let pre = l0.forward(&rfd);
            let hid = relu(&pre);
            outputs.push(l1.forward(&hid));
            head_pre.push(pre);
            head_hidden.push(hid);
        }
        ChunkForward {
            x0,
            z0,
            fd,
            rfd,
            head_pre,
            head_hidden,
            outputs,
        }
    }

    /// Deltas for every Gaussian of `cloud` at normalized time `t`.
    pub fn deltas(&self, cloud: &GaussianCloud, t: f64) -> Vec<Deltas> {
        let tape = self.forward(cloud, t);
        tape.chunks
            .iter()
            .flat_map(|fwd| (0..fwd.x0.ncols()).map(move |j| deltas_at(&fwd.outputs, j)))
            .collect()
    }

    fn forward(&self, cloud: &GaussianCloud, t: f64) -> DeformTape {
        assert_eq!(cloud.sh_stride(), self.sh_stride, "sh layout mismatch");
        DeformTape {
            t,
            n: cloud.len(),
            chunks: cloud
                .positions
                .par_chunks(CHUNK)
                .map(|c| self.forward_chunk(c, t))
                .collect(),
        }
    }

    /// `cloud + Δ(cloud, t)` in raw parameter space. The quaternion sum is
    /// renormalized when the cloud is rendered.
    pub fn deform(&self, cloud: &GaussianCloud, t: f64) -> GaussianCloud {
        self.deform_with_tape(cloud, t).0
    }

    /// [`Self::deform`] that also keeps the activations needed by
    /// [`Self::deform_backward_with_tape`].
    pub fn deform_with_tape(&self, cloud: &GaussianCloud, t: f64) -> (GaussianCloud, DeformTape) {
        let tape = self.forward(cloud, t);
        let stride = self.sh_stride;
        let mut out = cloud.clone();
        for (ci, fwd) in tape.chunks.iter().enumerate() {
            let [dp, dr, ds, dop, dsh] = [0, 1, 2, 3, 4].map(|h| &fwd.outputs[h]);
            for j in 0..fwd.x0.ncols() {
                let i = ci * CHUNK + j;
                for a in 0..3 {
                    out.positions[i][a] += dp[(a, j)];
                    out.log_scales[i][a] += ds[(a, j)];
                }
                for a in 0..4 {
                    out.rotations[i][a] += dr[(a, j)];
                }
                out.opacity_logits[i] += dop[(0, j)];
                for (k, v) in out.sh_coeffs[i * stride..(i + 1) * stride]
                    .iter_mut()
                    .enumerate()
                {
                    *v += dsh[(k, j)];
                }
            }
        }
        (out, tape)
    }

    /// Backward of [`Self::deform`]: given gradients with respect to the
    /// deformed cloud, returns gradients for the canonical cloud and for the
    /// field's tensors. Chunks are merged in order, so the result does not
    /// depend on the worker count.
    pub fn deform_backward(
        &self,
        cloud: &GaussianCloud,
        t: f64,
        d_deformed: &CloudGradients,
    ) -> Result<(CloudGradients, DeformationGradients)> {
        let tape = self.forward(cloud, t);
        self.deform_backward_with_tape(cloud, &tape, d_deformed)
    }

    /// Backward using activations recorded by [`Self::deform_with_tape`] on
    /// the same cloud and field.
    pub fn deform_backward_with_tape(
        &self,
        cloud: &GaussianCloud,
        tape: &DeformTape,
        d_deformed: &CloudGradients,
    ) -> Result<(CloudGradients, DeformationGradients)> {
        if tape.n != cloud.len() {
            return Err(Error::LengthMismatch {
                left: tape.n,
                right: cloud.len(),
            });
        }
        let t = tape.t;
        if d_deformed.len() != cloud.len() {
            return Err(Error::LengthMismatch {
                left: d_deformed.len(),
                right: cloud.len(),
            });
        }
        let stride = self.sh_stride;
        let n_grid = self.num_grid_tensors();

        let chunks: Vec<(DMatrix<f64>, Vec<DenseGrad>)> = cloud
            .positions
            .par_chunks(CHUNK)
            .zip(tape.chunks.par_iter())
            .enumerate()
            .map(|(ci, (chunk, fwd))| {
                let base = ci * CHUNK;
                let b = chunk.len();
                let mut dense: Vec<DenseGrad> = self
                    .feature_mlp
                    .iter()
                    .chain(self.heads.iter().flatten())
                    .map(DenseGrad::zeros_like)
                    .collect();
                let mut d_rfd = DMatrix::zeros(self.config.hidden, b);
                for (h, [l0, l1]) in self.heads.iter().enumerate() {
                    let rows = fwd.outputs[h].nrows();
                    let d_out = DMatrix::from_fn(rows, b, |r, j| {
                        let i = base + j;
                        match h {
                            0 => d_deformed.positions[i][r],
                            1 => d_deformed.rotations[i][r],
                            2 => d_deformed.log_scales[i][r],
                            3 => d_deformed.opacity_logits[i],
                            _ => d_deformed.sh_coeffs[i * stride + r],
                        }
                    });
                    let (g0, g1) = dense[2 + 2 * h..].split_at_mut(1);
                    let mut d_hid = l1.backward(&fwd.head_hidden[h], &d_out, &mut g1[0]);
                    relu_mask(&mut d_hid, &fwd.head_pre[h]);
                    d_rfd += l0.backward(&fwd.rfd, &d_hid, &mut g0[0]);
                }
                relu_mask(&mut d_rfd, &fwd.fd);
                let (g0, g1) = dense.split_at_mut(1);
                let mut d_z0 = self.feature_mlp[1].backward(&relu(&fwd.z0), &d_rfd, &mut g1[0]);
                relu_mask(&mut d_z0, &fwd.z0);
                let d_x0 = self.feature_mlp[0].backward(&fwd.x0, &d_z0, &mut g0[0]);
                (d_x0, dense)
            })
            .collect();

        // The grid scatter runs in Gaussian order, so sums do not depend on
        // the worker count.
        let mut canonical = d_deformed.clone();
        let mut grads = DeformationGradients::zeros_like(self);
        let dim = self.grid.output_dim();
        for (ci, (d_x0, dense)) in chunks.into_iter().enumerate() {
            for (k, g) in dense.iter().enumerate() {
                add_into(&mut grads.tensors[n_grid + 2 * k], g.weight.as_slice());
                add_into(&mut grads.tensors[n_grid + 2 * k + 1], g.bias.as_slice());
            }
            for j in 0..d_x0.ncols() {
                let i = ci * CHUNK + j;
                let col = &d_x0.as_slice()[j * dim..(j + 1) * dim];
                let dp = self.grid.sample_backward(
                    &cloud.positions[i],
                    t,
                    col,
                    &mut grads.tensors[..n_grid],
                );
                for a in 0..3 {
                    canonical.positions[i][a] += dp[a];
                }
            }
        }
        Ok((canonical, grads))
    }

    /// Checks that tensor shapes match this field's configuration.
    pub fn check_shapes(&self, shapes: &[Vec<usize>]) -> Result<()> {
        let own = self.tensor_shapes();
        if own.as_slice() != shapes {
            return Err(Error::Shape(
                "deformation tensors do not match the configured grid/MLP sizes".into(),
            ));
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn deltas_at(outputs: &[DMatrix<f64>], j: usize) -> Deltas {
    let col = |h: usize| outputs[h].column(j);
    Deltas {
        position: std::array::from_fn(|r| col(0)[r]),
        rotation: std::array::from_fn(|r| col(1)[r]),
        log_scale: std::array::from_fn(|r| col(2)[r]),
        opacity: col(3)[0],
        sh: col(4).iter().copied().collect(),
    }
}
