//! Two-stage optimization: a static warm-up of the canonical cloud, then
//! joint training of the cloud and the deformation field.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, CloudMoments, Moments};
use crate::dataset::{split_train_val, Dataset, FrameSample, SplitMode};
use crate::deformation::{Aabb, DeformationConfig, DeformationField, DeformationGradients};
use crate::densify::{densify_and_prune, DensifyConfig, DensifyReport, GradStats};
use crate::depth_prior::backproject;
use crate::error::{Error, Result};
use crate::losses::{total_loss, FrameTargets, LossBreakdown, LossWeights, Terms};
use crate::metrics::{psnr, ssim};
use crate::rasterizer::{render, render_backward, CloudGradients, RenderOutput, RenderSettings};
use crate::scene::{inverse_sigmoid, Camera, CameraSpec, GaussianCloud, GaussianParams};
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position: f64,
    /// Final position rate reached by exponential decay.
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
    pub grid: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1.6e-3,
            scale: 1.6e-3,
            opacity: 1.6e-3,
            sh: 1.6e-3,
            grid: 1.6e-3,
            mlp: 1.6e-4,
        }
    }
}

impl LearningRates {
    /// Position rate after `progress ∈ [0,1]` of training (log-linear).
    pub fn position_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        (self.position.ln() * (1.0 - p) + self.position_final.ln() * p).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub stride: usize,
    pub max_points: usize,
    pub opacity: f64,
    /// Initial scale as a multiple of the back-projected pixel spacing.
    pub scale_factor: f64,
    /// Deformation box padding as a fraction of the largest cloud extent.
    pub bbox_margin: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            stride: 2,
            max_points: 100_000,
            opacity: 0.1,
            scale_factor: 1.0,
            bbox_margin: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub static_iterations: usize,
    pub dynamic_iterations: usize,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub densify: DensifyConfig,
    pub deformation: DeformationConfig,
    pub max_sh_degree: usize,
    /// The active SH degree grows by one every this many iterations.
    pub sh_interval: usize,
    pub init: InitConfig,
    pub split: SplitMode,
    /// Validation metrics are logged every this many iterations.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            static_iterations: 1000,
            dynamic_iterations: 3000,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            densify: DensifyConfig::default(),
            deformation: DeformationConfig::default(),
            max_sh_degree: 2,
            sh_interval: 1000,
            init: InitConfig::default(),
            split: SplitMode::Interleaved,
            eval_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn total_iterations(&self) -> usize {
        self.static_iterations + self.dynamic_iterations
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.max_sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::Config(format!(
                "max_sh_degree must be at most {}",
                sh::MAX_SH_DEGREE
            )));
        }
        let d = &self.deformation;
        if d.levels == 0 || d.features == 0 || d.hidden == 0 || d.resolution.iter().any(|&r| r < 2)
        {
            return Err(Error::Config(
                "deformation grid needs ≥2 vertices per axis and nonzero sizes".into(),
            ));
        }
        if self.init.stride == 0 {
            return Err(Error::Config("init stride must be at least 1".into()));
        }
        let lr = &self.lr;
        let rates = [
            lr.position,
            lr.position_final,
            lr.rotation,
            lr.scale,
            lr.opacity,
            lr.sh,
            lr.grid,
            lr.mlp,
        ];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to resume training or render.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed iterations.
    pub iteration: usize,
    pub cloud: GaussianCloud,
    pub field: DeformationField,
    pub cloud_moments: CloudMoments,
    pub field_moments: Vec<Moments>,
    pub cloud_step: u64,
    pub field_step: u64,
    pub scene_extent: f64,
    /// Camera of the first frame, used when rendering without a manifest.
    pub camera: CameraSpec,
}

impl TrainState {
    /// Renders the deformed cloud at normalized time `t`.
    pub fn render(&self, camera: &Camera, t: f64, settings: &RenderSettings) -> RenderOutput {
        render(&self.field.deform(&self.cloud, t), camera, settings)
    }
}

/// Builds the initial state by back-projecting frame 0.
pub fn initialize(first: &FrameSample, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let cam = &first.camera;
    let points = backproject(
        &first.image,
        &first.depth,
        &first.mask,
        cam,
        config.init.stride,
        config.init.max_points,
    )?;
    if points.is_empty() {
        return Err(Error::EmptySelection(
            "initial point cloud (mask or depth removes every pixel)",
        ));
    }
    let mut cloud = GaussianCloud::new(config.max_sh_degree);
    let stride = cloud.sh_stride();
    for (p, c) in points.positions.iter().zip(&points.colors) {
        let z = cam.world_to_camera(&nalgebra::Vector3::from(*p)).z;
        let spacing = config.init.stride as f64 * z / cam.fx.min(cam.fy);
        let mut coeffs = vec![0.0; stride];
        coeffs[..3].copy_from_slice(&c.map(sh::rgb_to_dc));
        cloud.push(GaussianParams {
            position: *p,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [(config.init.scale_factor * spacing).ln(); 3],
            opacity_logit: inverse_sigmoid(config.init.opacity),
            sh: coeffs,
        });
    }
    let bbox = Aabb::from_points(&points.positions, config.init.bbox_margin)?;
    let field = DeformationField::new(
        config.deformation.clone(),
        bbox,
        config.max_sh_degree,
        config.seed,
    );
    let field_moments = field
        .tensors()
        .iter()
        .map(|t| Moments::zeros(t.len()))
        .collect();
    Ok(TrainState {
        config: config.clone(),
        iteration: 0,
        cloud_moments: CloudMoments::zeros(cloud.len(), stride),
        scene_extent: scene_extent(&points.positions),
        cloud,
        field,
        field_moments,
        cloud_step: 0,
        field_step: 0,
        camera: cam.to_spec(),
    })
}

/// 1.1 × the largest distance from the centroid.
fn scene_extent(points: &[[f64; 3]]) -> f64 {
    let n = points.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let r = points
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    1.1 * r.max(1e-6)
}

/// Loss value and all gradients for one view.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub loss: LossBreakdown,
    pub output: RenderOutput,
    /// Gradients for the canonical cloud.
    pub cloud: CloudGradients,
    /// Present in the dynamic stage.
    pub field: Option<DeformationGradients>,
    /// Gradients with respect to the rendered (deformed) cloud, used for
    /// densification statistics.
    pub rendered: CloudGradients,
}

/// Targets of a decoded frame.
pub fn frame_targets(frame: &FrameSample) -> FrameTargets<'_> {
    FrameTargets {
        color: &frame.image,
        depth: &frame.depth.values,
        depth_valid: &frame.depth.valid,
        normals: &frame.normals,
        mask: &frame.mask,
    }
}

/// Forward and backward for one view. The static stage renders the
/// canonical cloud and omits the TV term; the dynamic stage renders the
/// deformed cloud at `t` and includes it.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients(
    cloud: &GaussianCloud,
    field: &DeformationField,
    targets: &FrameTargets<'_>,
    camera: &Camera,
    t: f64,
    dynamic: bool,
    weights: &LossWeights,
    settings: &RenderSettings,
) -> Result<StepGradients> {
    let deformed = dynamic.then(|| field.deform_with_tape(cloud, t));
    let rendered_cloud = deformed.as_ref().map_or(cloud, |d| &d.0);
    let output = render(rendered_cloud, camera, settings);
    let tv = dynamic.then(|| field.grid.tv_loss());
    let (loss, upstream) = total_loss(&output, targets, weights, tv, Terms::ALL)?;
    let rendered = render_backward(rendered_cloud, camera, settings, &output, &upstream)?;
    let (cloud_grads, field_grads) = if let Some((_, tape)) = &deformed {
        let (c, mut f) = field.deform_backward_with_tape(cloud, tape, &rendered)?;
        let n_grid = field.num_grid_tensors();
        field.grid.tv_backward(weights.tv, &mut f.tensors[..n_grid]);
        (c, Some(f))
    } else {
        (rendered.clone(), None)
    };
    Ok(StepGradients {
        loss,
        output,
        cloud: cloud_grads,
        field: field_grads,
        rendered,
    })
}

/// One row of the metric history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    /// NaN when there is no validation frame.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean losses over the iterations since the previous row.
    pub loss: LossBreakdown,
}

pub const CSV_HEADER: &str =
    "iteration,psnr,ssim,loss_total,loss_color,loss_depth,loss_surf,loss_con,loss_tv";

/// Metric history as CSV text.
pub fn history_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration, r.psnr, r.ssim, l.total, l.color, l.depth, l.surf, l.con, l.tv
        );
    }
    s
}

pub fn write_history_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    crate::io::write_file(path, history_csv(rows).as_bytes())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: TrainState,
    pub history: Vec<MetricRow>,
    /// Total loss of every iteration.
    pub loss_trace: Vec<f64>,
    pub skipped_gradients: usize,
    pub densify: Vec<(usize, DensifyReport)>,
}

/// Per-frame and mean validation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `(frame index, psnr, ssim)`.
    pub frames: Vec<(usize, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Renders each frame at its timestamp and compares with its image.
/// Mean PSNR is computed from per-frame values; an empty set gives NaN.
pub fn evaluate(
    state: &TrainState,
    frames: &[FrameSample],
    settings: &RenderSettings,
) -> Result<Evaluation> {
    let mut out = Evaluation {
        frames: Vec::with_capacity(frames.len()),
        mean_psnr: f64::NAN,
        mean_ssim: f64::NAN,
    };
    for f in frames {
        let r = state.render(&f.camera, f.time, settings);
        let p = psnr(&r.color, &f.image)?;
        let s = ssim(&r.color, &f.image, f.camera.width, f.camera.height)?;
        out.frames.push((f.index, p, s));
    }
    if !frames.is_empty() {
        let n = frames.len() as f64;
        out.mean_psnr = out.frames.iter().map(|f| f.1).sum::<f64>() / n;
        out.mean_ssim = out.frames.iter().map(|f| f.2).sum::<f64>() / n;
    }
    Ok(out)
}

fn flat3(v: &mut [[f64; 3]]) -> &mut [f64] {
    v.as_flattened_mut()
}

fn update_cloud(
    state: &mut TrainState,
    g: &CloudGradients,
    iteration: usize,
    total: usize,
) -> usize {
    state.cloud_step += 1;
    let step = state.cloud_step;
    let lr = state.config.lr;
    let cfg = state.config.adam;
    let progress = iteration as f64 / total.max(1) as f64;
    let pos_lr = lr.position_at(progress) * state.scene_extent;
    let m = &mut state.cloud_moments;
    let c = &mut state.cloud;
    let mut skipped = 0;
    skipped += adam_step(
        flat3(&mut c.positions),
        g.positions.as_flattened(),
        &mut m.positions,
        pos_lr,
        step,
        &cfg,
    );
    skipped += adam_step(
        c.rotations.as_flattened_mut(),
        g.rotations.as_flattened(),
        &mut m.rotations,
        lr.rotation,
        step,
        &cfg,
    );
    skipped += adam_step(
        flat3(&mut c.log_scales),
        g.log_scales.as_flattened(),
        &mut m.log_scales,
        lr.scale,
        step,
        &cfg,
    );
    skipped += adam_step(
        &mut c.opacity_logits,
        &g.opacity_logits,
        &mut m.opacity_logits,
        lr.opacity,
        step,
        &cfg,
    );
    skipped += adam_step(
        &mut c.sh_coeffs,
        &g.sh_coeffs,
        &mut m.sh_coeffs,
        lr.sh,
        step,
        &cfg,
    );
    skipped
}

fn update_field(state: &mut TrainState, g: &DeformationGradients) -> usize {
    state.field_step += 1;
    let step = state.field_step;
    let cfg = state.config.adam;
    let n_grid = state.field.num_grid_tensors();
    let (lr_grid, lr_mlp) = (state.config.lr.grid, state.config.lr.mlp);
    let mut skipped = 0;
    for (k, (p, m)) in state
        .field
        .tensors_mut()
        .into_iter()
        .zip(state.field_moments.iter_mut())
        .enumerate()
    {
        let lr = if k < n_grid { lr_grid } else { lr_mlp };
        skipped += adam_step(p, &g.tensors[k], m, lr, step, &cfg);
    }
    skipped
}

/// Trains from scratch on `dataset` (frame 0 initializes the cloud).
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    settings: &RenderSettings,
    progress: Option<&dyn Fn(&MetricRow)>,
) -> Result<TrainOutput> {
    config.validate()?;
    let (train_idx, val_idx) = split_train_val(dataset.len(), config.split);
    let train_frames = dataset.frames(&train_idx)?;
    let val_frames = dataset.frames(&val_idx)?;
    let first = train_frames
        .iter()
        .find(|f| f.index == 0)
        .ok_or(Error::EmptySelection("training frames"))?;
    let state = initialize(first, config)?;
    train_from(state, &train_frames, &val_frames, settings, progress)
}

/// Continues optimization of `state` until its configured iteration count.
pub fn train_from(
    mut state: TrainState,
    train_frames: &[FrameSample],
    val_frames: &[FrameSample],
    settings: &RenderSettings,
    progress: Option<&dyn Fn(&MetricRow)>,
) -> Result<TrainOutput> {
    if train_frames.is_empty() {
        return Err(Error::EmptySelection("training frames"));
    }
    let config = state.config.clone();
    let total = config.total_iterations();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut stats = GradStats::new(state.cloud.len());
    let mut out = TrainOutput {
        state: state.clone(),
        history: Vec::new(),
        loss_trace: Vec::new(),
        skipped_gradients: 0,
        densify: Vec::new(),
    };
    let mut window = LossBreakdown::default();
    let mut window_len = 0usize;

    for iter in state.iteration + 1..=total {
        if order.is_empty() {
            order = (0..train_frames.len()).collect();
            order.shuffle(&mut rng);
        }
        let frame = &train_frames[order.pop().unwrap_or(0)];
        let dynamic = iter > config.static_iterations;
        if config.sh_interval > 0 {
            state.cloud.sh_degree = ((iter - 1) / config.sh_interval).min(config.max_sh_degree);
        }

        let step = loss_and_gradients(
            &state.cloud,
            &state.field,
            &frame_targets(frame),
            &frame.camera,
            frame.time,
            dynamic,
            &config.weights,
            settings,
        )?;
        if !step.loss.total.is_finite() {
            return Err(Error::Diverged { iteration: iter });
        }
        out.loss_trace.push(step.loss.total);
        accumulate(&mut window, &step.loss);
        window_len += 1;

        let visible: Vec<bool> = step.output.projected.iter().map(Option::is_some).collect();
        stats.accumulate(
            &step.rendered.screen,
            &visible,
            frame.camera.width,
            frame.camera.height,
        );

        out.skipped_gradients += update_cloud(&mut state, &step.cloud, iter, total);
        if let Some(fg) = &step.field {
            out.skipped_gradients += update_field(&mut state, fg);
        }
        state.iteration = iter;

        if config.densify.is_due(iter, total) {
            let mut drng = ChaCha8Rng::seed_from_u64(
                config.seed ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let report = densify_and_prune(
                &mut state.cloud,
                &mut state.cloud_moments,
                &mut stats,
                &config.densify,
                state.scene_extent,
                &mut drng,
            );
            log::debug!(
                "iteration {iter}: {report:?}, {} Gaussians",
                state.cloud.len()
            );
            out.densify.push((iter, report));
        }

        let log_now =
            (config.eval_interval > 0 && iter % config.eval_interval == 0) || iter == total;
        if log_now {
            let eval = evaluate(&state, val_frames, settings)?;
            let k = 1.0 / window_len.max(1) as f64;
            let row = MetricRow {
                iteration: iter,
                psnr: eval.mean_psnr,
                ssim: eval.mean_ssim,
                loss: scale(&window, k),
            };
            if let Some(cb) = progress {
                cb(&row);
            }
            out.history.push(row);
            window = LossBreakdown::default();
            window_len = 0;
        }
    }
    out.state = state;
    Ok(out)
}

fn accumulate(acc: &mut LossBreakdown, l: &LossBreakdown) {
    acc.total += l.total;
    acc.color += l.color;
    acc.depth += l.depth;
    acc.surf += l.surf;
    acc.con += l.con;
    acc.tv += l.tv;
}

fn scale(l: &LossBreakdown, k: f64) -> LossBreakdown {
    LossBreakdown {
        total: l.total * k,
        color: l.color * k,
        depth: l.depth * k,
        surf: l.surf * k,
        con: l.con * k,
        tv: l.tv * k,
    }
}
