//! Central finite-difference verification of the analytic cloud gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{self, LossWeights, ViewTargets};
use crate::raster::{CloudGrads, PixelGrads, Renderer};
use crate::types::{
    Camera, ConfidenceMap, DepthMap, DepthSemantics, GaussianCloud, ImageBuffer, NormalMap,
    PixelMask,
};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSelector {
    Photometric,
    Depth,
    Normal,
    Scale,
    /// Weighted sum of all four.
    Total,
}

impl LossSelector {
    pub const ALL: [LossSelector; 5] = [
        LossSelector::Photometric,
        LossSelector::Depth,
        LossSelector::Normal,
        LossSelector::Scale,
        LossSelector::Total,
    ];

    /// Keeps only the selected term, at its weight in `base`.
    fn weights(self, base: &LossWeights) -> LossWeights {
        let keep = |on: bool, w: f64| if on { w } else { 0.0 };
        let all = self == LossSelector::Total;
        LossWeights {
            w_depth: keep(all || self == LossSelector::Depth, base.w_depth),
            w_normal: keep(all || self == LossSelector::Normal, base.w_normal),
            w_scale: keep(all || self == LossSelector::Scale, base.w_scale),
            ..*base
        }
    }

    /// Multiplier on the photometric term.
    fn photometric_scale(self) -> f64 {
        match self {
            LossSelector::Photometric | LossSelector::Total => 1.0,
            _ => 0.0,
        }
    }
}

/// Supervision for a single view.
#[derive(Debug, Clone)]
pub struct GradcheckTargets {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub confidence: ConfidenceMap,
    pub normals: NormalMap,
    pub mask: PixelMask,
}

impl GradcheckTargets {
    /// Targets offset from the current render by a margin of random sign, so
    /// no L1 kink lies within a finite-difference step; random depth and
    /// confidence with some zero-confidence pixels; a random mask.
    pub fn random<R: Rng>(
        rng: &mut R,
        renderer: &Renderer,
        cloud: &GaussianCloud,
        cam: &Camera,
    ) -> Result<Self> {
        let out = renderer.render(cloud, cam)?;
        let offset = |rng: &mut R| {
            let m = rng.random_range(0.05..0.3);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        };
        let (w, h) = out.dims();
        let n = w * h;
        let image = ImageBuffer::new(
            w,
            h,
            out.color
                .values
                .iter()
                .map(|c| c.map(|v| v + offset(rng)))
                .collect(),
        )?;
        let normals = NormalMap::new(
            w,
            h,
            out.normals
                .values
                .iter()
                .map(|c| c.map(|v| v + offset(rng)))
                .collect(),
        )?;
        let depth = DepthMap::new(
            w,
            h,
            (0..n).map(|_| rng.random_range(1.0..8.0)).collect(),
            DepthSemantics::Estimated,
        )?;
        let confidence = ConfidenceMap::new(
            w,
            h,
            (0..n)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        0.0
                    } else {
                        rng.random()
                    }
                })
                .collect(),
        )?;
        let mask = PixelMask::new(w, h, (0..n).map(|_| rng.random_bool(0.7)).collect())?;
        Ok(GradcheckTargets {
            image,
            depth,
            confidence,
            normals,
            mask,
        })
    }
}

/// A differentiable scalar of the cloud, with its analytic gradient.
pub struct Objective<'a> {
    pub renderer: &'a Renderer,
    pub camera: &'a Camera,
    pub targets: &'a GradcheckTargets,
    pub selector: LossSelector,
    pub weights: LossWeights,
}

impl Objective<'_> {
    pub fn value(&self, cloud: &GaussianCloud) -> Result<f64> {
        Ok(self.evaluate(cloud, false)?.0)
    }

    pub fn gradient(&self, cloud: &GaussianCloud) -> Result<(f64, CloudGrads)> {
        let (v, g) = self.evaluate(cloud, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn evaluate(
        &self,
        cloud: &GaussianCloud,
        want_grad: bool,
    ) -> Result<(f64, Option<CloudGrads>)> {
        let out = self.renderer.render(cloud, self.camera)?;
        let t = self.targets;
        let views = [ViewTargets {
            render: &out,
            gt: &t.image,
            depth: Some((&t.depth, &t.confidence)),
            normals: Some((&t.normals, &t.mask)),
        }];
        let w = self.selector.weights(&self.weights);
        let k = self.selector.photometric_scale();
        if !want_grad {
            let (_, b) = losses::total_loss(&views, &[], cloud, &w)?;
            return Ok((k * b.photometric + b.depth + b.normal + b.scale, None));
        }
        let (_, b, g) = losses::total_loss_grad(&views, &[], cloud, &w)?;
        let mut pix: PixelGrads = g.views.into_iter().next().expect("one view");
        pix.color.iter_mut().flatten().for_each(|x| *x *= k);
        let mut grads = self
            .renderer
            .render_backward(cloud, self.camera, &out, &pix)?;
        for (a, s) in grads.log_scales.iter_mut().zip(&g.log_scales) {
            (0..3).for_each(|j| a[j] += s[j]);
        }
        Ok((
            k * b.photometric + b.depth + b.normal + b.scale,
            Some(grads),
        ))
    }
}

/// Worst disagreement within one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub parameters: usize,
    pub max_relative_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.group.as_str())
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Parameter accessors shared by the analytic and perturbed clouds.
fn groups(cloud: &GaussianCloud) -> Vec<(&'static str, usize)> {
    vec![
        ("means", cloud.means.len() * 3),
        ("rotations", cloud.rotations.len() * 4),
        ("log_scales", cloud.log_scales.len() * 3),
        ("opacity_logits", cloud.opacity_logits.len()),
        ("sh", cloud.sh.len()),
    ]
}

fn param_mut<'a>(cloud: &'a mut GaussianCloud, group: &str, k: usize) -> &'a mut f64 {
    match group {
        "means" => &mut cloud.means.as_flattened_mut()[k],
        "rotations" => &mut cloud.rotations.as_flattened_mut()[k],
        "log_scales" => &mut cloud.log_scales.as_flattened_mut()[k],
        "opacity_logits" => &mut cloud.opacity_logits[k],
        "sh" => &mut cloud.sh[k],
        _ => unreachable!("unknown group {group}"),
    }
}

fn grad_of(g: &CloudGrads, group: &str, k: usize) -> f64 {
    match group {
        "means" => g.means.as_flattened()[k],
        "rotations" => g.rotations.as_flattened()[k],
        "log_scales" => g.log_scales.as_flattened()[k],
        "opacity_logits" => g.opacity_logits[k],
        "sh" => g.sh[k],
        _ => unreachable!("unknown group {group}"),
    }
}

/// Compares `analytic` against central differences of `f` for every
/// parameter. Quaternions are perturbed without renormalization; the
/// objective sees the raw stored values.
pub fn compare<F>(
    cloud: &GaussianCloud,
    analytic: &CloudGrads,
    step: f64,
    tolerance: f64,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&GaussianCloud) -> Result<f64>,
{
    let mut reports = Vec::new();
    let mut work = cloud.clone();
    for (name, count) in groups(cloud) {
        let mut worst = (0.0, 0.0, 0.0);
        for k in 0..count {
            let orig = *param_mut(&mut work, name, k);
            *param_mut(&mut work, name, k) = orig + step;
            let fp = f(&work)?;
            *param_mut(&mut work, name, k) = orig - step;
            let fm = f(&work)?;
            *param_mut(&mut work, name, k) = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = grad_of(analytic, name, k);
            let e = relative_error(a, numeric);
            if !(e <= worst.0) {
                worst = (e, a, numeric);
            }
        }
        reports.push(GroupReport {
            group: name.to_string(),
            parameters: count,
            max_relative_error: worst.0,
            worst_analytic: worst.1,
            worst_numeric: worst.2,
            passed: worst.0 < tolerance,
        });
    }
    Ok(GradcheckReport {
        step,
        tolerance,
        groups: reports,
    })
}

pub fn gradcheck(
    objective: &Objective,
    cloud: &GaussianCloud,
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let (_, analytic) = objective.gradient(cloud)?;
    compare(cloud, &analytic, step, tolerance, |c| objective.value(c))
}

/// Weights with every regularizer at 1, so each selected term is checked at
/// unit scale.
pub fn unit_weights() -> LossWeights {
    LossWeights {
        lambda_dssim: LossWeights::default().lambda_dssim,
        w_depth: 1.0,
        w_normal: 1.0,
        w_scale: 1.0,
        w_pseudo: 1.0,
    }
}

/// Checks every selector in `selectors` on one random scene of `gaussians`
/// Gaussians seen by a `size × size` camera, rendered with smooth settings.
pub fn check_random_scene(
    seed: u64,
    gaussians: usize,
    size: usize,
    sh_degree: usize,
    selectors: &[LossSelector],
) -> Result<Vec<(LossSelector, GradcheckReport)>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cam = crate::synthetic::default_camera(size);
    let cloud = crate::synthetic::random_scene(&mut rng, &cam, gaussians, sh_degree);
    let renderer = Renderer::new(crate::raster::RenderSettings::smooth());
    let targets = GradcheckTargets::random(&mut rng, &renderer, &cloud, &cam)?;
    selectors
        .iter()
        .map(|&selector| {
            let obj = Objective {
                renderer: &renderer,
                camera: &cam,
                targets: &targets,
                selector,
                weights: unit_weights(),
            };
            Ok((
                selector,
                gradcheck(&obj, &cloud, DEFAULT_STEP, DEFAULT_TOLERANCE)?,
            ))
        })
        .collect()
}
