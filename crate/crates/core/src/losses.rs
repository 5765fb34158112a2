//! Training objective terms, each returning its value together with the
//! gradient with respect to the rendered buffers.

use serde::{Deserialize, Serialize};

use crate::depth_prior::{gradients, gradients_backward, normalize_map};
use crate::error::{Error, Result};
use crate::rasterizer::{RenderGradients, RenderOutput};

/// Confidence is clamped to `[CONFIDENCE_MIN, 1]` before entering the
/// confidence loss.
pub const CONFIDENCE_MIN: f64 = 1e-3;
/// Pixels need at least this coverage to enter the depth terms.
pub const DEPTH_MIN_CONFIDENCE: f64 = 1e-3;
/// Pixels need more than this coverage to enter the normal loss.
pub const NORMAL_MIN_CONFIDENCE: f64 = 0.5;
/// Relative variance guard of [`pearson_corr`].
pub const PEARSON_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub color: f64,
    pub tv: f64,
    pub norm: f64,
    pub grad: f64,
    pub surf: f64,
    pub con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            color: 1.0,
            tv: 1.0,
            norm: 0.01,
            grad: 0.001,
            surf: 0.001,
            con: 0.0001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.color, self.tv, self.norm, self.grad, self.surf, self.con,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
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

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Masked mean absolute error over pixels and channels.
pub fn color_loss(
    rendered: &[[f64; 3]],
    target: &[[f64; 3]],
    mask: &[bool],
) -> Result<(f64, Vec<[f64; 3]>)> {
    check_len(target.len(), rendered.len())?;
    check_len(mask.len(), rendered.len())?;
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptySelection("color loss mask"));
    }
    let k = 1.0 / (3 * n) as f64;
    let mut sum = 0.0;
    let mut grad = vec![[0.0; 3]; rendered.len()];
    for i in 0..rendered.len() {
        if !mask[i] {
            continue;
        }
        for c in 0..3 {
            let d = rendered[i][c] - target[i][c];
            sum += d.abs();
            grad[i][c] = k * sign(d);
        }
    }
    Ok((sum * k, grad))
}

/// Normalized rendered and prior depth for the depth term of
/// [`confidence_loss`].
pub struct NormalizedDepths<'a> {
    pub rendered: &'a [f64],
    pub prior: &'a [f64],
    pub mask: &'a [bool],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceLoss {
    pub value: f64,
    pub d_depth: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
    pub d_confidence: Vec<f64>,
}

/// `E[e_d / 2W² + log W] + E[e_c / 2W² + log W]` with `e_d` the squared
/// normalized depth error and `e_c` the channel-mean squared color error.
/// `depth = None` skips the depth term.
pub fn confidence_loss(
    depth: Option<NormalizedDepths<'_>>,
    rendered: &[[f64; 3]],
    target: &[[f64; 3]],
    confidence: &[f64],
    mask: &[bool],
) -> Result<ConfidenceLoss> {
    let px = rendered.len();
    check_len(target.len(), px)?;
    check_len(confidence.len(), px)?;
    check_len(mask.len(), px)?;
    let clamp = |w: f64| -> (f64, f64) {
        if w < CONFIDENCE_MIN {
            (CONFIDENCE_MIN, 0.0)
        } else if w > 1.0 {
            (1.0, 0.0)
        } else {
            (w, 1.0)
        }
    };
    let mut out = ConfidenceLoss {
        value: 0.0,
        d_depth: vec![0.0; px],
        d_color: vec![[0.0; 3]; px],
        d_confidence: vec![0.0; px],
    };
    // d/dW of e / 2W² + log W
    let dw = |e: f64, w: f64| -e / (w * w * w) + 1.0 / w;

    if let Some(d) = depth {
        check_len(d.rendered.len(), px)?;
        check_len(d.prior.len(), px)?;
        check_len(d.mask.len(), px)?;
        let n = d.mask.iter().filter(|&&m| m).count();
        if n > 0 {
            let k = 1.0 / n as f64;
            let mut sum = 0.0;
            for i in 0..px {
                if !d.mask[i] {
                    continue;
                }
                let (w, pass) = clamp(confidence[i]);
                let diff = d.rendered[i] - d.prior[i];
                let e = diff * diff;
                sum += e / (2.0 * w * w) + w.ln();
                out.d_depth[i] = k * diff / (w * w);
                out.d_confidence[i] += k * pass * dw(e, w);
            }
            out.value += sum * k;
        }
    }

    let n = mask.iter().filter(|&&m| m).count();
    if n > 0 {
        let k = 1.0 / n as f64;
        let mut sum = 0.0;
        for i in 0..px {
            if !mask[i] {
                continue;
            }
            let (w, pass) = clamp(confidence[i]);
            let diff: [f64; 3] = std::array::from_fn(|c| rendered[i][c] - target[i][c]);
            let e = diff.iter().map(|d| d * d).sum::<f64>() / 3.0;
            sum += e / (2.0 * w * w) + w.ln();
            for c in 0..3 {
                out.d_color[i][c] = k * diff[c] / (3.0 * w * w);
            }
            out.d_confidence[i] += k * pass * dw(e, w);
        }
        out.value += sum * k;
    }
    Ok(out)
}

/// Mean over selected pixels of the channel-mean absolute normal
/// difference. Pixels are selected by `mask` and confidence above
/// [`NORMAL_MIN_CONFIDENCE`]; an empty selection gives 0.
pub fn surface_normal_loss(
    rendered: &[[f64; 3]],
    pseudo: &[[f64; 3]],
    confidence: &[f64],
    mask: &[bool],
) -> Result<(f64, Vec<[f64; 3]>)> {
    let px = rendered.len();
    check_len(pseudo.len(), px)?;
    check_len(confidence.len(), px)?;
    check_len(mask.len(), px)?;
    let sel: Vec<bool> = (0..px)
        .map(|i| mask[i] && confidence[i] > NORMAL_MIN_CONFIDENCE)
        .collect();
    let n = sel.iter().filter(|&&s| s).count();
    let mut grad = vec![[0.0; 3]; px];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let k = 1.0 / (3 * n) as f64;
    let mut sum = 0.0;
    for i in 0..px {
        if !sel[i] {
            continue;
        }
        for c in 0..3 {
            let d = rendered[i][c] - pseudo[i][c];
            sum += d.abs();
            grad[i][c] = k * sign(d);
        }
    }
    Ok((sum * k, grad))
}

/// Pearson correlation. Returns 0 when either input's variance is at or
/// below `PEARSON_EPS` times its mean square.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(pearson_with_grad(a, b)?.0)
}

struct Moments {
    mean: f64,
    var: f64,
}

fn moments(x: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Moments { mean, var }
}

fn degenerate(x: &[f64], m: &Moments) -> bool {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    m.var <= PEARSON_EPS * ms || m.var == 0.0
}

/// Correlation and its gradient with respect to `b`.
pub fn pearson_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(b.len(), a.len())?;
    if a.len() < 2 {
        return Err(Error::Config(
            "correlation needs at least two samples".into(),
        ));
    }
    let (ma, mb) = (moments(a), moments(b));
    let mut grad = vec![0.0; b.len()];
    if degenerate(a, &ma) || degenerate(b, &mb) {
        return Ok((0.0, grad));
    }
    let n = a.len() as f64;
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma.mean) * (y - mb.mean))
        .sum::<f64>()
        / n;
    let (sa, sb) = (ma.var.sqrt(), mb.var.sqrt());
    let r = cov / (sa * sb);
    for (i, g) in grad.iter_mut().enumerate() {
        *g = ((a[i] - ma.mean) / (sa * sb) - r * (b[i] - mb.mean) / mb.var) / n;
    }
    Ok((r.clamp(-1.0, 1.0), grad))
}

fn magnitudes(gw: &[f64], gh: &[f64]) -> Vec<f64> {
    gw.iter()
        .zip(gh)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthRegLoss {
    /// Weighted sum of both terms.
    pub value: f64,
    /// Unweighted mean L1 between normalized depths (0 if degenerate).
    pub norm_term: f64,
    /// Unweighted `1 − Pearson` of gradient magnitudes.
    pub grad_term: f64,
    pub degenerate: bool,
    pub d_rendered: Vec<f64>,
}

/// `λ_norm · ‖D_norm − D̂_norm‖₁ + λ_grad · (1 − P(‖∇D‖, ‖∇D̂‖))` over the
/// masked pixels.
pub fn depth_reg_loss(
    width: usize,
    height: usize,
    rendered: &[f64],
    prior: &[f64],
    mask: &[bool],
    weights: &LossWeights,
) -> Result<DepthRegLoss> {
    let px = width * height;
    check_len(rendered.len(), px)?;
    check_len(prior.len(), px)?;
    check_len(mask.len(), px)?;
    let n = mask.iter().filter(|&&m| m).count();
    let mut out = DepthRegLoss {
        value: 0.0,
        norm_term: 0.0,
        grad_term: 0.0,
        degenerate: false,
        d_rendered: vec![0.0; px],
    };
    if n == 0 {
        out.degenerate = true;
        return Ok(out);
    }

    let rn = normalize_map(rendered, mask);
    let pn = normalize_map(prior, mask);
    out.degenerate = rn.degenerate || pn.degenerate;
    if !out.degenerate {
        let k = 1.0 / n as f64;
        let mut d_norm = vec![0.0; px];
        for i in 0..px {
            if mask[i] {
                let d = rn.values[i] - pn.values[i];
                out.norm_term += d.abs();
                d_norm[i] = weights.norm * k * sign(d);
            }
        }
        out.norm_term *= k;
        let d = rn.backward(rendered, mask, &d_norm);
        for (o, v) in out.d_rendered.iter_mut().zip(d) {
            *o += v;
        }
    }

    if n >= 2 {
        let (rgw, rgh) = gradients(width, height, rendered, mask);
        let (pgw, pgh) = gradients(width, height, prior, mask);
        let rmag = magnitudes(&rgw, &rgh);
        let pmag = magnitudes(&pgw, &pgh);
        let idx: Vec<usize> = (0..px).filter(|&i| mask[i]).collect();
        let a: Vec<f64> = idx.iter().map(|&i| pmag[i]).collect();
        let b: Vec<f64> = idx.iter().map(|&i| rmag[i]).collect();
        let (r, g) = pearson_with_grad(&a, &b)?;
        out.grad_term = 1.0 - r;
        let mut d_gw = vec![0.0; px];
        let mut d_gh = vec![0.0; px];
        for (j, &i) in idx.iter().enumerate() {
            if rmag[i] > 0.0 {
                let dm = -weights.grad * g[j] / rmag[i];
                d_gw[i] = dm * rgw[i];
                d_gh[i] = dm * rgh[i];
            }
        }
        let d = gradients_backward(width, height, mask, &d_gw, &d_gh);
        for (o, v) in out.d_rendered.iter_mut().zip(d) {
            *o += v;
        }
    }
    out.value = weights.norm * out.norm_term + weights.grad * out.grad_term;
    Ok(out)
}

/// Supervision for one frame.
pub struct FrameTargets<'a> {
    pub color: &'a [[f64; 3]],
    pub depth: &'a [f64],
    pub depth_valid: &'a [bool],
    pub normals: &'a [[f64; 3]],
    pub mask: &'a [bool],
}

/// Term values of the total objective. `depth` is already weighted;
/// `surf`, `con` and `tv` are unweighted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub surf: f64,
    pub con: f64,
    pub tv: f64,
}

/// Which terms of the objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub color: bool,
    pub depth: bool,
    pub surf: bool,
    pub con: bool,
}

impl Terms {
    pub const ALL: Self = Self {
        color: true,
        depth: true,
        surf: true,
        con: true,
    };
}

/// Pixels entering the depth terms: frame mask, valid prior and enough
/// rendered coverage.
pub fn depth_mask(output: &RenderOutput, targets: &FrameTargets<'_>) -> Vec<bool> {
    (0..output.depth.len())
        .map(|i| {
            targets.mask[i] && targets.depth_valid[i] && output.confidence[i] > DEPTH_MIN_CONFIDENCE
        })
        .collect()
}

/// `w_c·L_color + w_tv·L_tv + L_depth + λ_surf·L_surf + λ_con·L_con`.
/// `tv` is the precomputed plane TV value, `None` in the static stage.
/// Returns the breakdown and the gradient with respect to the render maps
/// (the TV gradient is the caller's responsibility).
pub fn total_loss(
    output: &RenderOutput,
    targets: &FrameTargets<'_>,
    weights: &LossWeights,
    tv: Option<f64>,
    terms: Terms,
) -> Result<(LossBreakdown, RenderGradients)> {
    let px = output.width * output.height;
    check_len(targets.color.len(), px)?;
    check_len(targets.depth.len(), px)?;
    check_len(targets.depth_valid.len(), px)?;
    check_len(targets.normals.len(), px)?;
    check_len(targets.mask.len(), px)?;
    let mut grads = RenderGradients::zeros(px);
    let mut b = LossBreakdown::default();

    if terms.color {
        let (v, g) = color_loss(&output.color, targets.color, targets.mask)?;
        b.color = v;
        for (o, gi) in grads.color.iter_mut().zip(&g) {
            for c in 0..3 {
                o[c] += weights.color * gi[c];
            }
        }
    }

    let dmask = depth_mask(output, targets);
    if terms.depth {
        let r = depth_reg_loss(
            output.width,
            output.height,
            &output.depth,
            targets.depth,
            &dmask,
            weights,
        )?;
        b.depth = r.value;
        for (o, v) in grads.depth.iter_mut().zip(&r.d_rendered) {
            *o += v;
        }
    }

    if terms.surf {
        let (v, g) = surface_normal_loss(
            &output.normal,
            targets.normals,
            &output.confidence,
            targets.mask,
        )?;
        b.surf = v;
        for (o, gi) in grads.normal.iter_mut().zip(&g) {
            for c in 0..3 {
                o[c] += weights.surf * gi[c];
            }
        }
    }

    if terms.con {
        let rn = normalize_map(&output.depth, &dmask);
        let pn = normalize_map(targets.depth, &dmask);
        let depth = (!rn.degenerate && !pn.degenerate).then(|| NormalizedDepths {
            rendered: &rn.values,
            prior: &pn.values,
            mask: &dmask,
        });
        let has_depth = depth.is_some();
        let c = confidence_loss(
            depth,
            &output.color,
            targets.color,
            &output.confidence,
            targets.mask,
        )?;
        b.con = c.value;
        for i in 0..px {
            for ch in 0..3 {
                grads.color[i][ch] += weights.con * c.d_color[i][ch];
            }
            grads.confidence[i] += weights.con * c.d_confidence[i];
        }
        if has_depth {
            let scaled: Vec<f64> = c.d_depth.iter().map(|g| weights.con * g).collect();
            let d = rn.backward(&output.depth, &dmask, &scaled);
            for (o, v) in grads.depth.iter_mut().zip(d) {
                *o += v;
            }
        }
    }

    b.tv = tv.unwrap_or(0.0);
    b.total = weights.color * b.color
        + weights.tv * b.tv
        + b.depth
        + weights.surf * b.surf
        + weights.con * b.con;
    Ok((b, grads))
}
