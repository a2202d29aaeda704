//! Small synthetic reconstruction benchmark: two textured planes seen by
//! three training cameras on an arc, evaluated from a held-out camera.

use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry;
use crate::metrics;
use crate::optim::{self, PseudoView, TrainConfig, TrainState, TrainView};
use crate::raster::{RenderOutput, Renderer};
use crate::sh;
use crate::synthetic::{checker_texture, stripe_texture, TexturedPlane};
use crate::types::{Camera, ConfidenceMap, DepthMap, DepthSemantics, GaussianCloud};

/// Image side of every benchmark view.
pub const IMAGE_SIZE: usize = 48;
/// Angle of the outer training cameras from the central one.
pub const BASELINE_DEG: f64 = 30.0;
/// Angle of the held-out camera.
pub const HELDOUT_DEG: f64 = 15.0;

/// Ground truth of the benchmark.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub cloud: GaussianCloud,
    pub train_cameras: Vec<Camera>,
    pub heldout_camera: Camera,
    /// Half the diagonal of the ground-truth bounding box.
    pub extent: f64,
}

/// Camera on a horizontal arc of radius 5 around `(0, 0, 5)`, `deg` degrees
/// from the z axis.
fn arc_camera(deg: f64, size: usize) -> Camera {
    let a = deg.to_radians();
    let target = Vector3::new(0.0, 0.0, 5.0);
    let eye = target + Vector3::new(-5.0 * a.sin(), 0.0, -5.0 * a.cos());
    Camera::look_at(
        eye,
        target,
        Vector3::new(0.0, -1.0, 0.0),
        size,
        size,
        size as f64,
        0.1,
        100.0,
    )
    .expect("valid arc camera")
}

/// Background checkerboard at z = 6 and a tilted striped card in front,
/// about 2000 Gaussians in total. Training cameras sit at `-baseline_deg`,
/// 0 and `+baseline_deg` on the arc, the held-out camera at `heldout_deg`.
pub fn toy_scene(image_size: usize, baseline_deg: f64, heldout_deg: f64) -> ToyScene {
    let background = TexturedPlane {
        origin: Vector3::new(-2.6, -2.6, 6.2),
        axis_u: Vector3::new(5.2, 0.0, 0.0),
        axis_v: Vector3::new(0.0, 5.2, 0.0),
        samples_u: 32,
        samples_v: 32,
        texture: checker_texture,
    };
    let foreground = TexturedPlane {
        origin: Vector3::new(-1.3, -1.0, 3.8),
        axis_u: Vector3::new(1.9, 0.0, 0.5),
        axis_v: Vector3::new(0.0, 1.9, 0.0),
        samples_u: 31,
        samples_v: 31,
        texture: stripe_texture,
    };
    let mut cloud = GaussianCloud::new(0).expect("degree 0");
    background.append_to(&mut cloud, 0.95).expect("plane");
    foreground.append_to(&mut cloud, 0.95).expect("plane");
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for m in &cloud.means {
        lo = lo.inf(&Vector3::from(*m));
        hi = hi.sup(&Vector3::from(*m));
    }
    ToyScene {
        cloud,
        train_cameras: [-baseline_deg, 0.0, baseline_deg]
            .iter()
            .map(|d| arc_camera(*d, image_size))
            .collect(),
        heldout_camera: arc_camera(heldout_deg, image_size),
        extent: 0.5 * (hi - lo).norm(),
    }
}

/// Everything a training run needs, derived from a [`ToyScene`].
#[derive(Debug, Clone)]
pub struct ToyData {
    pub views: Vec<TrainView>,
    pub pseudo: Vec<PseudoView>,
    pub init: GaussianCloud,
    pub heldout_camera: Camera,
    pub heldout_truth: RenderOutput,
    pub rig_extent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyOptions {
    /// Point noise standard deviation as a fraction of the scene extent.
    pub point_noise: f64,
    /// RMS of the smooth relative distortion applied to the estimated depth.
    pub depth_noise: f64,
    pub conf_threshold: f64,
    pub pseudo_views_per_pair: usize,
    pub seed: u64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions {
            point_noise: 0.02,
            depth_noise: 0.01,
            conf_threshold: geometry::CONFIDENCE_THRESHOLD,
            pseudo_views_per_pair: 1,
            seed: 0,
        }
    }
}

/// Relative 3×3 depth range above which a pixel counts as an occlusion edge.
pub const EDGE_RELATIVE_JUMP: f64 = 0.05;

fn is_depth_edge(z: &DepthMap, x: usize, y: usize) -> bool {
    let (w, h) = z.dims();
    let c = z.get(x, y);
    (y.saturating_sub(1)..(y + 2).min(h))
        .flat_map(|yy| (x.saturating_sub(1)..(x + 2).min(w)).map(move |xx| (xx, yy)))
        .any(|(xx, yy)| {
            let n = z.get(xx, yy);
            n.is_nan() || (n - c).abs() > EDGE_RELATIVE_JUMP * c
        })
}

/// Smooth random field over the unit square with unit RMS: a sum of four
/// low-frequency plane waves.
fn smooth_field<R: rand::Rng>(rng: &mut R) -> impl Fn(f64, f64) -> f64 {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.5..2.0) * std::f64::consts::TAU;
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    move |a, b| {
        waves
            .iter()
            .map(|(kx, ky, phase)| (kx * a + ky * b + phase).sin())
            .sum::<f64>()
            / 2f64.sqrt()
    }
}

/// Renders the training and held-out views, estimated depth (ground-truth
/// z-depth under a smooth multiplicative distortion, confidence zero at
/// occlusion edges) and a noisy, confidence-filtered
/// point cloud initialization.
pub fn toy_data(scene: &ToyScene, opts: &ToyOptions) -> Result<ToyData> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let renderer = Renderer::default();
    let mut views = Vec::new();
    for (i, cam) in scene.train_cameras.iter().enumerate() {
        let out = renderer.render(&scene.cloud, cam)?;
        let z = out.normalized_depth();
        let mut values = Vec::with_capacity(z.values.len());
        let mut conf = Vec::with_capacity(z.values.len());
        let field = smooth_field(&mut rng);
        for (p, (d, a)) in z.values.iter().zip(&out.alpha).enumerate() {
            let noise = field(
                (p % cam.width) as f64 / cam.width as f64,
                (p / cam.width) as f64 / cam.height as f64,
            );
            if d.is_nan() || *a < 0.5 || is_depth_edge(&z, p % cam.width, p / cam.width) {
                values.push(f64::NAN);
                conf.push(0.0);
            } else {
                values.push(d * (1.0 + opts.depth_noise * noise));
                conf.push(*a);
            }
        }
        let depth = DepthMap::new(cam.width, cam.height, values, DepthSemantics::Estimated)?;
        let conf = ConfidenceMap::new(cam.width, cam.height, conf)?;
        views.push(
            TrainView::new(format!("train_{i}"), cam.clone(), out.color)?.with_depth(
                depth,
                conf,
                geometry::PATCH_SIZE,
                opts.conf_threshold,
            )?,
        );
    }
    let pseudo =
        optim::build_pseudo_views(&views, opts.pseudo_views_per_pair, opts.conf_threshold)?;

    let sigma = opts.point_noise * scene.extent;
    let mut points = Vec::with_capacity(scene.cloud.len());
    let mut confidences = Vec::with_capacity(scene.cloud.len());
    for i in 0..scene.cloud.len() {
        let n = Vector3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ) * sigma;
        let color = sh::eval_color(scene.cloud.sh_of(i), &[sh::C0]).map(|c| c.clamp(0.0, 1.0));
        points.push((Vector3::from(scene.cloud.means[i]) + n, color));
        confidences.push((-n.norm()).exp());
    }
    let kept = geometry::filter_points(&points, &confidences, opts.conf_threshold)?;
    let init = optim::init_from_points(&kept, &scene.train_cameras, 0)?;
    let heldout_truth = renderer.render(&scene.cloud, &scene.heldout_camera)?;
    Ok(ToyData {
        views,
        pseudo,
        init,
        heldout_camera: scene.heldout_camera.clone(),
        heldout_truth,
        rig_extent: optim::scene_extent(&scene.train_cameras),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyResult {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Mean PSNR over the training views.
    pub train_psnr_db: f64,
    /// Mean absolute error of the alpha-normalized plane distance over pixels
    /// the ground truth covers (alpha ≥ 0.5); uncovered render pixels count
    /// as distance 0.
    pub depth_error: f64,
    pub final_loss: f64,
    pub gaussians: usize,
    pub seconds: f64,
}

pub fn plane_depth_error(render: &RenderOutput, truth: &RenderOutput) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..truth.alpha.len() {
        let t = truth.depth_plane.values[p] / truth.alpha[p];
        if truth.alpha[p] < 0.5 || !t.is_finite() {
            continue;
        }
        let r = render.depth_plane.values[p] / render.alpha[p];
        sum += (if r.is_finite() { r } else { 0.0 } - t).abs();
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn run(name: &str, data: &ToyData, cfg: &TrainConfig) -> Result<ToyResult> {
    let start = Instant::now();
    let state = TrainState::new(data.init.clone(), data.rig_extent, cfg.seed);
    let state = optim::train(state, &data.views, &data.pseudo, cfg)?;
    let renderer = Renderer::new(cfg.render_settings());
    let out = renderer.render(&state.cloud, &data.heldout_camera)?;
    let mut train_psnr = 0.0;
    for v in &data.views {
        train_psnr += metrics::psnr(&renderer.render(&state.cloud, &v.camera)?.color, &v.image)?;
    }
    let elapsed: Duration = start.elapsed();
    Ok(ToyResult {
        name: name.to_string(),
        psnr_db: metrics::psnr(&out.color, &data.heldout_truth.color)?,
        ssim: metrics::ssim(&out.color, &data.heldout_truth.color)?,
        train_psnr_db: train_psnr / data.views.len() as f64,
        depth_error: plane_depth_error(&out, &data.heldout_truth),
        final_loss: state.history.last().map_or(f64::NAN, |r| r.total),
        gaussians: state.cloud.len(),
        seconds: elapsed.as_secs_f64(),
    })
}

/// The four ablation configurations, cumulative: photometric only, then
/// adding depth, normal and pseudo-view supervision in turn.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let off = TrainConfig {
        w_depth: 0.0,
        w_normal: 0.0,
        w_pseudo: 0.0,
        ..base.clone()
    };
    let depth = TrainConfig {
        w_depth: base.w_depth,
        ..off.clone()
    };
    let normal = TrainConfig {
        w_normal: base.w_normal,
        ..depth.clone()
    };
    let pseudo = TrainConfig {
        w_pseudo: base.w_pseudo,
        ..normal.clone()
    };
    vec![
        ("photometric", off),
        ("+depth", depth),
        ("+depth+normal", normal),
        ("+depth+normal+pseudo", pseudo),
    ]
}

/// Builds the default scene and data, then trains and evaluates every
/// ablation configuration with `iterations` steps.
pub fn ablation(iterations: usize, seed: u64) -> Result<Vec<ToyResult>> {
    let scene = toy_scene(IMAGE_SIZE, BASELINE_DEG, HELDOUT_DEG);
    let data = toy_data(
        &scene,
        &ToyOptions {
            seed,
            ..ToyOptions::default()
        },
    )?;
    let base = TrainConfig {
        iterations,
        seed,
        ..toy_config()
    };
    ablation_configs(&base)
        .iter()
        .map(|(name, cfg)| run(name, &data, cfg))
        .collect()
}

/// Default configuration of the benchmark runs.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        iterations: 2000,
        sh_degree: 0,
        ..TrainConfig::default()
    }
}
