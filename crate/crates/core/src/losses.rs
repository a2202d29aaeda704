//! Training losses and their gradients with respect to rendered quantities.
//!
//! Every `*_grad` function returns the loss value together with the gradient
//! of that value, never of a weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{PixelGrads, RenderOutput};
use crate::ssim;
use crate::types::{
    check_dims, ConfidenceMap, DepthMap, GaussianCloud, ImageBuffer, NormalMap, PixelMask,
};

/// Minimum total confidence for the depth correlation to be defined.
pub const MIN_WEIGHT_SUM: f64 = 1e-9;
/// Minimum weighted variance of either depth map.
pub const MIN_VARIANCE: f64 = 1e-12;

fn photometric_inner(
    render: &ImageBuffer,
    gt: &ImageBuffer,
    mask: Option<&PixelMask>,
    lambda: f64,
    want_grad: bool,
) -> Result<(f64, Vec<[f64; 3]>)> {
    check_dims(render.dims(), gt.dims())?;
    if let Some(m) = mask {
        check_dims(render.dims(), m.dims())?;
    }
    let n = render.values.len();
    let selected = |p: usize| mask.is_none_or(|m| m.values[p]);
    let count = (0..n).filter(|&p| selected(p)).count();
    let mut grad = if want_grad {
        vec![[0.0; 3]; n]
    } else {
        Vec::new()
    };
    if count == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / (3 * count) as f64;
    let mut l1 = 0.0;
    for p in (0..n).filter(|&p| selected(p)) {
        for c in 0..3 {
            let d = render.values[p][c] - gt.values[p][c];
            l1 += d.abs();
            if want_grad && d != 0.0 {
                grad[p][c] = (1.0 - lambda) * norm * d.signum();
            }
        }
    }
    l1 *= norm;
    if lambda == 0.0 {
        return Ok(((1.0 - lambda) * l1, grad));
    }
    let map = ssim::ssim_map(render, gt)?;
    let mean_ssim = (0..n)
        .filter(|&p| selected(p))
        .map(|p| map[p].iter().sum::<f64>())
        .sum::<f64>()
        * norm;
    if want_grad {
        let up: Vec<[f64; 3]> = (0..n)
            .map(|p| {
                if selected(p) {
                    [-0.5 * lambda * norm; 3]
                } else {
                    [0.0; 3]
                }
            })
            .collect();
        let gs = ssim::ssim_backward(render, gt, &up)?;
        for (g, s) in grad.iter_mut().zip(&gs) {
            (0..3).for_each(|c| g[c] += s[c]);
        }
    }
    Ok(((1.0 - lambda) * l1 + lambda * (1.0 - mean_ssim) / 2.0, grad))
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)/2`, averaged over pixels and channels.
pub fn photometric_loss(render: &ImageBuffer, gt: &ImageBuffer, lambda: f64) -> Result<f64> {
    Ok(photometric_inner(render, gt, None, lambda, false)?.0)
}

pub fn photometric_loss_grad(
    render: &ImageBuffer,
    gt: &ImageBuffer,
    lambda: f64,
) -> Result<(f64, Vec<[f64; 3]>)> {
    photometric_inner(render, gt, None, lambda, true)
}

/// Photometric loss restricted to `mask`: both the L1 and the SSIM maps are
/// averaged over masked-in pixels only. An empty mask gives 0.
pub fn masked_photometric_loss(
    render: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &PixelMask,
    lambda: f64,
) -> Result<f64> {
    Ok(photometric_inner(render, gt, Some(mask), lambda, false)?.0)
}

pub fn masked_photometric_loss_grad(
    render: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &PixelMask,
    lambda: f64,
) -> Result<(f64, Vec<[f64; 3]>)> {
    photometric_inner(render, gt, Some(mask), lambda, true)
}

/// Index of the smallest scale, preferring the last axis on ties.
fn min_axis(log_scale: &[f64; 3]) -> usize {
    let mut k = 2;
    for j in (0..2).rev() {
        if log_scale[j] < log_scale[k] {
            k = j;
        }
    }
    k
}

/// Mean over Gaussians of the smallest activated scale.
pub fn scale_loss(cloud: &GaussianCloud) -> Result<f64> {
    Ok(scale_loss_grad(cloud)?.0)
}

/// Value and gradient with respect to the log scales.
pub fn scale_loss_grad(cloud: &GaussianCloud) -> Result<(f64, Vec<[f64; 3]>)> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = cloud.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![[0.0; 3]; cloud.len()];
    for (i, ls) in cloud.log_scales.iter().enumerate() {
        let k = min_axis(ls);
        let s = ls[k].exp();
        total += s;
        grad[i][k] = s / n;
    }
    Ok((total / n, grad))
}

/// Confidence-weighted first and second moments of a predicted/target depth pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMoments {
    pub mu_p: f64,
    pub mu_t: f64,
    /// `Σ C (D_p − μ_p)² / Σ C`
    pub var_p: f64,
    pub var_t: f64,
    /// `Σ C (D_p − μ_p)(D_t − μ_t) / Σ C`
    pub cov: f64,
    pub weight_sum: f64,
}

impl WeightedMoments {
    /// Pixels where either depth is NaN get zero weight.
    pub fn compute(dp: &DepthMap, dt: &DepthMap, conf: &ConfidenceMap) -> Result<WeightedMoments> {
        check_dims(dp.dims(), dt.dims())?;
        check_dims(dp.dims(), conf.dims())?;
        let w = effective_weights(dp, dt, conf);
        let weight_sum: f64 = w.iter().sum();
        if weight_sum <= 0.0 {
            return Ok(WeightedMoments {
                mu_p: 0.0,
                mu_t: 0.0,
                var_p: 0.0,
                var_t: 0.0,
                cov: 0.0,
                weight_sum: 0.0,
            });
        }
        let mut sp = 0.0;
        let mut st = 0.0;
        for (i, wi) in w.iter().enumerate().filter(|(_, wi)| **wi > 0.0) {
            sp += wi * dp.values[i];
            st += wi * dt.values[i];
        }
        let mu_p = sp / weight_sum;
        let mu_t = st / weight_sum;
        let (mut vp, mut vt, mut cv) = (0.0, 0.0, 0.0);
        for (i, wi) in w.iter().enumerate().filter(|(_, wi)| **wi > 0.0) {
            let a = dp.values[i] - mu_p;
            let b = dt.values[i] - mu_t;
            vp += wi * a * a;
            vt += wi * b * b;
            cv += wi * a * b;
        }
        Ok(WeightedMoments {
            mu_p,
            mu_t,
            var_p: vp / weight_sum,
            var_t: vt / weight_sum,
            cov: cv / weight_sum,
            weight_sum,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.weight_sum >= MIN_WEIGHT_SUM
            && self.var_p >= MIN_VARIANCE
            && self.var_t >= MIN_VARIANCE)
    }

    /// Weighted Pearson correlation, `None` when degenerate.
    pub fn pearson(&self) -> Option<f64> {
        if self.is_degenerate() {
            return None;
        }
        Some(self.cov / (self.var_p * self.var_t).sqrt())
    }
}

fn effective_weights(dp: &DepthMap, dt: &DepthMap, conf: &ConfidenceMap) -> Vec<f64> {
    conf.values
        .iter()
        .zip(dp.values.iter().zip(&dt.values))
        .map(|(c, (p, t))| {
            if p.is_nan() || t.is_nan() || !(*c > 0.0) {
                0.0
            } else {
                *c
            }
        })
        .collect()
}

/// Depth correlation term.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthTerm {
    pub value: f64,
    pub degenerate: bool,
    pub moments: WeightedMoments,
    /// Gradient with respect to each predicted depth pixel.
    pub grad: Vec<f64>,
}

/// `1 − P`, where `P` is the confidence-weighted Pearson correlation of the
/// predicted and target depth. Degenerate inputs give 0.
pub fn pearson_depth_loss(dp: &DepthMap, dt: &DepthMap, conf: &ConfidenceMap) -> Result<f64> {
    let m = WeightedMoments::compute(dp, dt, conf)?;
    Ok(match m.pearson() {
        Some(p) => 1.0 - p.clamp(-1.0, 1.0),
        None => 0.0,
    })
}

pub fn pearson_depth_loss_grad(
    dp: &DepthMap,
    dt: &DepthMap,
    conf: &ConfidenceMap,
) -> Result<DepthTerm> {
    let moments = WeightedMoments::compute(dp, dt, conf)?;
    let mut grad = vec![0.0; dp.values.len()];
    let Some(p) = moments.pearson() else {
        return Ok(DepthTerm {
            value: 0.0,
            degenerate: true,
            moments,
            grad,
        });
    };
    // In unnormalized sums: P = cov / sqrt(vp vt).
    let w_total = moments.weight_sum;
    let vp = moments.var_p * w_total;
    let vt = moments.var_t * w_total;
    let cov = moments.cov * w_total;
    let root = (vp * vt).sqrt();
    for (i, wi) in effective_weights(dp, dt, conf).iter().enumerate() {
        if *wi > 0.0 {
            let a = dp.values[i] - moments.mu_p;
            let b = dt.values[i] - moments.mu_t;
            grad[i] = -wi * (b / root - cov * a / (vp * root));
        }
    }
    Ok(DepthTerm {
        value: 1.0 - p.clamp(-1.0, 1.0),
        degenerate: false,
        moments,
        grad,
    })
}

/// Masked normal term.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalTerm {
    pub value: f64,
    pub empty_mask: bool,
    /// Gradient with respect to each predicted normal.
    pub grad: Vec<[f64; 3]>,
}

/// Mean over masked-in pixels of `‖N_t − N_p‖₁`. An empty mask gives 0.
pub fn normal_loss(np: &NormalMap, nt: &NormalMap, mask: &PixelMask) -> Result<f64> {
    Ok(normal_loss_grad(np, nt, mask)?.value)
}

pub fn normal_loss_grad(np: &NormalMap, nt: &NormalMap, mask: &PixelMask) -> Result<NormalTerm> {
    check_dims(np.dims(), nt.dims())?;
    check_dims(np.dims(), mask.dims())?;
    let count = mask.count();
    let mut grad = vec![[0.0; 3]; np.values.len()];
    if count == 0 {
        return Ok(NormalTerm {
            value: 0.0,
            empty_mask: true,
            grad,
        });
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (p, g) in grad.iter_mut().enumerate() {
        if !mask.values[p] {
            continue;
        }
        for c in 0..3 {
            let d = np.values[p][c] - nt.values[p][c];
            total += d.abs();
            if d != 0.0 {
                g[c] = d.signum() * inv;
            }
        }
    }
    Ok(NormalTerm {
        value: total * inv,
        empty_mask: false,
        grad,
    })
}

/// Weights of the composite training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// D-SSIM share of the photometric term.
    pub lambda_dssim: f64,
    pub w_depth: f64,
    pub w_normal: f64,
    pub w_scale: f64,
    pub w_pseudo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dssim: 0.2,
            w_depth: 0.003,
            w_normal: 0.002,
            w_scale: 0.01,
            w_pseudo: 0.3,
        }
    }
}

/// Targets for one rendered real view.
#[derive(Debug, Clone, Copy)]
pub struct ViewTargets<'a> {
    pub render: &'a RenderOutput,
    pub gt: &'a ImageBuffer,
    /// Estimated depth and its confidence.
    pub depth: Option<(&'a DepthMap, &'a ConfidenceMap)>,
    /// Target normals and the pixels they are trusted on.
    pub normals: Option<(&'a NormalMap, &'a PixelMask)>,
}

/// Targets for one rendered pseudo view: the warped image and its valid pixels.
#[derive(Debug, Clone, Copy)]
pub struct PseudoTargets<'a> {
    pub render: &'a RenderOutput,
    pub gt: &'a ImageBuffer,
    pub mask: &'a PixelMask,
}

/// Weighted contribution of each term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub depth: f64,
    pub normal: f64,
    pub scale: f64,
    pub pseudo: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.photometric + self.depth + self.normal + self.scale + self.pseudo
    }
}

/// Gradients of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub views: Vec<PixelGrads>,
    pub pseudo: Vec<PixelGrads>,
    /// Direct gradient with respect to the cloud's log scales.
    pub log_scales: Vec<[f64; 3]>,
}

pub fn total_loss(
    views: &[ViewTargets],
    pseudo: &[PseudoTargets],
    cloud: &GaussianCloud,
    weights: &LossWeights,
) -> Result<(f64, LossBreakdown)> {
    let (total, breakdown, _) = total_inner(views, pseudo, cloud, weights, false)?;
    Ok((total, breakdown))
}

pub fn total_loss_grad(
    views: &[ViewTargets],
    pseudo: &[PseudoTargets],
    cloud: &GaussianCloud,
    weights: &LossWeights,
) -> Result<(f64, LossBreakdown, LossGradients)> {
    total_inner(views, pseudo, cloud, weights, true)
}

fn total_inner(
    views: &[ViewTargets],
    pseudo: &[PseudoTargets],
    cloud: &GaussianCloud,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(f64, LossBreakdown, LossGradients)> {
    let mut b = LossBreakdown::default();
    let mut grads = LossGradients {
        views: Vec::new(),
        pseudo: Vec::new(),
        log_scales: Vec::new(),
    };
    for v in views {
        let (w, h) = v.render.dims();
        let mut g = PixelGrads::zeros(w, h);
        let (value, gc) =
            photometric_inner(&v.render.color, v.gt, None, weights.lambda_dssim, want_grad)?;
        b.photometric += value;
        if want_grad {
            g.color = gc;
        }
        if weights.w_depth != 0.0 {
            if let Some((dt, conf)) = v.depth {
                let term = pearson_depth_loss_grad(&v.render.depth_plane, dt, conf)?;
                b.depth += weights.w_depth * term.value;
                g.depth_plane = term.grad.iter().map(|x| x * weights.w_depth).collect();
            }
        }
        if weights.w_normal != 0.0 {
            if let Some((nt, mask)) = v.normals {
                let term = normal_loss_grad(&v.render.normals, nt, mask)?;
                b.normal += weights.w_normal * term.value;
                g.normals = term
                    .grad
                    .iter()
                    .map(|n| n.map(|x| x * weights.w_normal))
                    .collect();
            }
        }
        if want_grad {
            grads.views.push(g);
        }
    }
    if weights.w_pseudo != 0.0 {
        for v in pseudo {
            let (w, h) = v.render.dims();
            let (value, gc) = photometric_inner(
                &v.render.color,
                v.gt,
                Some(v.mask),
                weights.lambda_dssim,
                want_grad,
            )?;
            b.pseudo += weights.w_pseudo * value;
            if want_grad {
                let mut g = PixelGrads::zeros(w, h);
                g.color = gc.iter().map(|c| c.map(|x| x * weights.w_pseudo)).collect();
                grads.pseudo.push(g);
            }
        }
    } else if want_grad {
        grads.pseudo = pseudo
            .iter()
            .map(|v| {
                let (w, h) = v.render.dims();
                PixelGrads::zeros(w, h)
            })
            .collect();
    }
    if weights.w_scale != 0.0 {
        let (value, g) = scale_loss_grad(cloud)?;
        b.scale = weights.w_scale * value;
        if want_grad {
            grads.log_scales = g.iter().map(|s| s.map(|x| x * weights.w_scale)).collect();
        }
    } else if want_grad {
        grads.log_scales = vec![[0.0; 3]; cloud.len()];
    }
    Ok((b.total(), b, grads))
}
