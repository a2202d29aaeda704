//! Training: configuration, Adam, view preparation and the optimization loop.

pub mod gradcheck;
pub mod init;

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, PseudoCamera};
use crate::losses::{self, LossBreakdown, LossWeights, PseudoTargets, ViewTargets};
use crate::raster::{RenderSettings, Renderer};
use crate::types::{
    logit, quat_to_matrix, Camera, ConfidenceMap, DepthMap, GaussianCloud, ImageBuffer, NormalMap,
    PixelMask,
};

pub use init::{init_from_points, scene_extent};

/// Activated opacity below which Gaussians are pruned.
pub const PRUNE_OPACITY: f64 = 0.005;
/// Activated opacity that an opacity reset clamps to.
pub const RESET_OPACITY: f64 = 0.01;
/// Scale divisor for the two children of a split Gaussian.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Every training knob. Missing keys in a config file take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub sh_degree: usize,
    pub threads: usize,
    pub background: [f64; 3],

    pub lambda_dssim: f64,
    pub w_depth: f64,
    pub w_normal: f64,
    pub w_scale: f64,
    pub w_pseudo: f64,

    pub conf_threshold: f64,
    pub patch_size: usize,
    pub pseudo_views_per_pair: usize,

    /// Position learning rate, multiplied by the scene extent and decayed
    /// exponentially to `lr_position_final` over `iterations`.
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_sh_dc: f64,
    pub lr_sh_rest: f64,

    pub prune_interval: usize,
    pub opacity_reset_enabled: bool,
    pub opacity_reset_interval: usize,
    pub splitting_enabled: bool,
    pub split_interval: usize,
    pub split_from: usize,
    pub split_until: usize,
    /// Threshold on the mean view-space positional gradient norm, in
    /// normalized device units.
    pub split_grad_threshold: f64,
    /// Multi-view observation trimming. Not implemented; enabling it is an error.
    pub multiview_trim_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            iterations: 7000,
            seed: 0,
            sh_degree: 3,
            threads: 1,
            background: [0.0; 3],
            lambda_dssim: w.lambda_dssim,
            w_depth: w.w_depth,
            w_normal: w.w_normal,
            w_scale: w.w_scale,
            w_pseudo: w.w_pseudo,
            conf_threshold: geometry::CONFIDENCE_THRESHOLD,
            patch_size: geometry::PATCH_SIZE,
            pseudo_views_per_pair: 2,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 0.05,
            lr_sh_dc: 2.5e-3,
            lr_sh_rest: 2.5e-3 / 20.0,
            prune_interval: 100,
            opacity_reset_enabled: false,
            opacity_reset_interval: 3000,
            splitting_enabled: false,
            split_interval: 100,
            split_from: 500,
            split_until: 15000,
            split_grad_threshold: 2e-4,
            multiview_trim_enabled: false,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_dssim: self.lambda_dssim,
            w_depth: self.w_depth,
            w_normal: self.w_normal,
            w_scale: self.w_scale,
            w_pseudo: self.w_pseudo,
        }
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            background: self.background,
            ..RenderSettings::default()
        }
        .with_threads(self.threads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.multiview_trim_enabled {
            return Err(Error::Unsupported(
                "multi-view observation trimming is not implemented".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::ValueRange(format!(
                "conf_threshold {} outside [0, 1]",
                self.conf_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::ValueRange(format!(
                "lambda_dssim {} outside [0, 1]",
                self.lambda_dssim
            )));
        }
        for (name, v) in [
            ("w_depth", self.w_depth),
            ("w_normal", self.w_normal),
            ("w_scale", self.w_scale),
            ("w_pseudo", self.w_pseudo),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::ValueRange(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return Err(Error::ValueRange(format!(
                "sh_degree {} above {}",
                self.sh_degree,
                crate::sh::MAX_DEGREE
            )));
        }
        if self.threads == 0 || self.patch_size == 0 {
            return Err(Error::ValueRange(
                "threads and patch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::SchemaError(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::SchemaError(e.to_string()))?
        };
        Ok(cfg)
    }
}

/// A posed training image with optional depth supervision.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub name: String,
    pub camera: Camera,
    pub image: ImageBuffer,
    /// Estimated (z) depth and its confidence.
    pub depth: Option<(DepthMap, ConfidenceMap)>,
    /// Normals derived from the estimated depth and the pixels they supervise.
    pub normals: Option<(NormalMap, PixelMask)>,
    /// Plane distance of the estimated depth under its normals; the target
    /// of the Pearson term.
    pub plane_target: Option<DepthMap>,
}

impl TrainView {
    pub fn new(name: impl Into<String>, camera: Camera, image: ImageBuffer) -> Result<Self> {
        crate::types::check_dims(camera.dims(), image.dims())?;
        Ok(TrainView {
            name: name.into(),
            camera,
            image,
            depth: None,
            normals: None,
            plane_target: None,
        })
    }

    /// Attaches estimated depth. Normal targets come from the depth map and
    /// are restricted to the patch-border mask, confident pixels and pixels
    /// where a normal could be computed. The depth target compared against
    /// rendered plane distance is the plane distance of the depth points.
    pub fn with_depth(
        mut self,
        depth: DepthMap,
        conf: ConfidenceMap,
        patch: usize,
        conf_threshold: f64,
    ) -> Result<Self> {
        crate::types::check_dims(self.camera.dims(), depth.dims())?;
        crate::types::check_dims(self.camera.dims(), conf.dims())?;
        let normals = geometry::normals_from_depth(&depth, &self.camera)?;
        let mut mask = geometry::patch_border_mask(self.camera.width, self.camera.height, patch)?;
        for (p, m) in mask.values.iter_mut().enumerate() {
            *m = *m && normals.values[p] != [0.0; 3] && conf.values[p] >= conf_threshold;
        }
        self.plane_target = Some(geometry::plane_distance_from_depth(
            &depth,
            &normals,
            &self.camera,
        )?);
        self.normals = Some((normals, mask));
        self.depth = Some((depth, conf));
        Ok(self)
    }
}

/// A warped image supervising an interpolated camera on its valid pixels.
#[derive(Debug, Clone)]
pub struct PseudoView {
    pub camera: Camera,
    pub image: ImageBuffer,
    pub mask: PixelMask,
    pub source: usize,
}

/// Pseudo views from every real view with estimated depth, warped from the
/// real view they are generated for.
pub fn build_pseudo_views(
    views: &[TrainView],
    per_pair: usize,
    conf_threshold: f64,
) -> Result<Vec<PseudoView>> {
    let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    let pseudo: Vec<PseudoCamera> = geometry::pseudo_cameras_with_sources(&cams, per_pair)?;
    let mut out = Vec::with_capacity(pseudo.len());
    for p in pseudo {
        let src = &views[p.source];
        let Some((depth, conf)) = &src.depth else {
            continue;
        };
        let (image, mask) = geometry::warp(
            &src.image,
            depth,
            conf,
            &src.camera,
            &p.camera,
            conf_threshold,
        )?;
        out.push(PseudoView {
            camera: p.camera,
            image,
            mask,
            source: p.source,
        });
    }
    Ok(out)
}

/// Adam moments for one parameter group laid out as `rows × width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamGroup {
    width: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl AdamGroup {
    fn new(rows: usize, width: usize) -> Self {
        AdamGroup {
            width,
            m: vec![0.0; rows * width],
            v: vec![0.0; rows * width],
        }
    }

    /// Updates columns `cols` of each `stride`-wide row of `params`.
    fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        stride: usize,
        cols: std::ops::Range<usize>,
        lr: f64,
        t: i32,
    ) {
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let rows = params.len() / stride.max(1);
        for r in 0..rows {
            for (k, c) in cols.clone().enumerate() {
                let i = r * stride + c;
                let j = r * self.width + k;
                let g = grads[i];
                self.m[j] = BETA1 * self.m[j] + (1.0 - BETA1) * g;
                self.v[j] = BETA2 * self.v[j] + (1.0 - BETA2) * g * g;
                let m_hat = self.m[j] / bc1;
                let v_hat = self.v[j] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }

    fn retain(&mut self, keep: &[bool]) {
        let w = self.width;
        let filter = |v: &Vec<f64>| -> Vec<f64> {
            v.chunks(w.max(1))
                .zip(keep)
                .filter(|(_, k)| **k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }

    fn push_zero_rows(&mut self, rows: usize) {
        self.m.extend(std::iter::repeat_n(0.0, rows * self.width));
        self.v.extend(std::iter::repeat_n(0.0, rows * self.width));
    }

    fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    means: AdamGroup,
    rotations: AdamGroup,
    log_scales: AdamGroup,
    opacity: AdamGroup,
    sh_dc: AdamGroup,
    sh_rest: AdamGroup,
}

impl Moments {
    fn new(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Moments {
            means: AdamGroup::new(n, 3),
            rotations: AdamGroup::new(n, 4),
            log_scales: AdamGroup::new(n, 3),
            opacity: AdamGroup::new(n, 1),
            sh_dc: AdamGroup::new(n, 3),
            sh_rest: AdamGroup::new(n, cloud.sh_stride() - 3),
        }
    }

    fn groups_mut(&mut self) -> [&mut AdamGroup; 6] {
        [
            &mut self.means,
            &mut self.rotations,
            &mut self.log_scales,
            &mut self.opacity,
            &mut self.sh_dc,
            &mut self.sh_rest,
        ]
    }
}

/// Which view an iteration trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum ViewRef {
    Real(usize),
    Pseudo(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub view: ViewRef,
    pub total: f64,
    pub breakdown: LossBreakdown,
    pub gaussians: usize,
}

/// Optimization state; owned by one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub cloud: GaussianCloud,
    pub seed: u64,
    pub extent: f64,
    pub history: Vec<LossRecord>,
    moments: Moments,
    adam_steps: i32,
    grad_accum: Vec<f64>,
    grad_count: Vec<u32>,
}

impl TrainState {
    pub fn new(cloud: GaussianCloud, extent: f64, seed: u64) -> Self {
        let n = cloud.len();
        TrainState {
            iteration: 0,
            moments: Moments::new(&cloud),
            cloud,
            seed,
            extent,
            history: Vec::new(),
            adam_steps: 0,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    fn retain(&mut self, keep: &[bool]) {
        self.cloud.retain(keep);
        for g in self.moments.groups_mut() {
            g.retain(keep);
        }
        let mut it = keep.iter();
        self.grad_accum.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.grad_count.retain(|_| *it.next().unwrap());
    }

    fn prune(&mut self) {
        let keep: Vec<bool> = (0..self.cloud.len())
            .map(|i| self.cloud.opacity(i) >= PRUNE_OPACITY)
            .collect();
        if keep.iter().any(|k| !k) {
            self.retain(&keep);
        }
    }

    fn reset_opacity(&mut self) {
        let cap = logit(RESET_OPACITY);
        for o in &mut self.cloud.opacity_logits {
            *o = o.min(cap);
        }
        self.moments.opacity.reset();
    }

    /// Replaces every Gaussian whose mean positional gradient reaches the
    /// threshold with two children sampled from it, scales divided by 1.6.
    fn split(&mut self, threshold: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n = self.cloud.len();
        let selected: Vec<bool> = (0..n)
            .map(|i| {
                self.grad_count[i] > 0
                    && self.grad_accum[i] / self.grad_count[i] as f64 >= threshold
            })
            .collect();
        let mut children = Vec::new();
        for i in (0..n).filter(|&i| selected[i]) {
            let g = self.cloud.gaussian(i);
            let r = quat_to_matrix(&g.rotation);
            let s = self.cloud.scale(i);
            for _ in 0..2 {
                let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let offset = r * Vector3::new(z[0] * s[0], z[1] * s[1], z[2] * s[2]);
                let mut child = g.clone();
                child.mean = [
                    g.mean[0] + offset.x,
                    g.mean[1] + offset.y,
                    g.mean[2] + offset.z,
                ];
                child.log_scale = g.log_scale.map(|l| l - SPLIT_SCALE_DIVISOR.ln());
                children.push(child);
            }
        }
        if children.is_empty() {
            return Ok(());
        }
        let keep: Vec<bool> = selected.iter().map(|s| !s).collect();
        self.retain(&keep);
        let added = children.len();
        for c in children {
            self.cloud.push(c)?;
        }
        for g in self.moments.groups_mut() {
            g.push_zero_rows(added);
        }
        self.grad_accum.extend(std::iter::repeat_n(0.0, added));
        self.grad_count.extend(std::iter::repeat_n(0, added));
        Ok(())
    }

    fn position_lr(&self, cfg: &TrainConfig) -> f64 {
        let t = if cfg.iterations == 0 {
            0.0
        } else {
            (self.iteration as f64 / cfg.iterations as f64).clamp(0.0, 1.0)
        };
        let lr = (cfg.lr_position.ln() * (1.0 - t) + cfg.lr_position_final.ln() * t).exp();
        lr * self.extent
    }
}

/// View visited at iteration `k` (0-based): real views round-robin, one
/// pseudo view after every full pass over the real views.
pub fn schedule(k: usize, real: usize, pseudo: usize) -> ViewRef {
    if pseudo == 0 {
        return ViewRef::Real(k % real);
    }
    let cycle = real + 1;
    let pos = k % cycle;
    if pos < real {
        ViewRef::Real(pos)
    } else {
        ViewRef::Pseudo((k / cycle) % pseudo)
    }
}

/// Runs `cfg.iterations` more iterations on `state`.
pub fn train(
    mut state: TrainState,
    views: &[TrainView],
    pseudo: &[PseudoView],
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::NoViews);
    }
    let renderer = Renderer::new(cfg.render_settings());
    let weights = cfg.loss_weights();
    let use_pseudo = if cfg.w_pseudo > 0.0 { pseudo.len() } else { 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(
        state.seed ^ 0x5eed_5eed_u64.wrapping_mul(state.iteration as u64 + 1),
    );
    let start = state.iteration;
    for k in start..start + cfg.iterations {
        let view = schedule(k, views.len(), use_pseudo);
        let camera = match view {
            ViewRef::Real(i) => &views[i].camera,
            ViewRef::Pseudo(i) => &pseudo[i].camera,
        };
        let out = renderer.render(&state.cloud, camera)?;
        let (total, breakdown, lg) = match view {
            ViewRef::Real(i) => {
                let v = &views[i];
                let t = ViewTargets {
                    render: &out,
                    gt: &v.image,
                    depth: v
                        .plane_target
                        .as_ref()
                        .zip(v.depth.as_ref())
                        .map(|(d, (_, c))| (d, c)),
                    normals: v.normals.as_ref().map(|(n, m)| (n, m)),
                };
                losses::total_loss_grad(&[t], &[], &state.cloud, &weights)?
            }
            ViewRef::Pseudo(i) => {
                let p = &pseudo[i];
                let t = PseudoTargets {
                    render: &out,
                    gt: &p.image,
                    mask: &p.mask,
                };
                losses::total_loss_grad(&[], &[t], &state.cloud, &weights)?
            }
        };
        if !total.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "non-finite loss at iteration {}",
                k + 1
            )));
        }
        let pix = lg
            .views
            .into_iter()
            .chain(lg.pseudo)
            .next()
            .expect("one view per iteration");
        let mut grads = renderer.render_backward(&state.cloud, camera, &out, &pix)?;
        for (a, s) in grads.log_scales.iter_mut().zip(&lg.log_scales) {
            (0..3).for_each(|j| a[j] += s[j]);
        }

        // Densification statistics in normalized device units.
        let (half_w, half_h) = (camera.width as f64 / 2.0, camera.height as f64 / 2.0);
        for (i, g) in grads.mean2d.iter().enumerate() {
            if g[0] != 0.0 || g[1] != 0.0 {
                state.grad_accum[i] += (g[0] * half_w).hypot(g[1] * half_h);
                state.grad_count[i] += 1;
            }
        }

        state.adam_steps += 1;
        let t = state.adam_steps;
        let stride = state.cloud.sh_stride();
        let lr_pos = state.position_lr(cfg);
        let m = &mut state.moments;
        let c = &mut state.cloud;
        m.means.step(
            c.means.as_flattened_mut(),
            grads.means.as_flattened(),
            3,
            0..3,
            lr_pos,
            t,
        );
        m.rotations.step(
            c.rotations.as_flattened_mut(),
            grads.rotations.as_flattened(),
            4,
            0..4,
            cfg.lr_rotation,
            t,
        );
        m.log_scales.step(
            c.log_scales.as_flattened_mut(),
            grads.log_scales.as_flattened(),
            3,
            0..3,
            cfg.lr_scale,
            t,
        );
        m.opacity.step(
            &mut c.opacity_logits,
            &grads.opacity_logits,
            1,
            0..1,
            cfg.lr_opacity,
            t,
        );
        m.sh_dc
            .step(&mut c.sh, &grads.sh, stride, 0..3, cfg.lr_sh_dc, t);
        if stride > 3 {
            m.sh_rest
                .step(&mut c.sh, &grads.sh, stride, 3..stride, cfg.lr_sh_rest, t);
        }
        c.normalize_rotations();

        state.iteration = k + 1;
        let it = state.iteration;
        state.history.push(LossRecord {
            iteration: it,
            view,
            total,
            breakdown,
            gaussians: state.cloud.len(),
        });
        if cfg.splitting_enabled
            && it.is_multiple_of(cfg.split_interval.max(1))
            && it >= cfg.split_from
            && it <= cfg.split_until
        {
            state.split(cfg.split_grad_threshold, &mut rng)?;
            state.grad_accum.iter_mut().for_each(|x| *x = 0.0);
            state.grad_count.iter_mut().for_each(|x| *x = 0);
        }
        if cfg.prune_interval > 0 && it.is_multiple_of(cfg.prune_interval) {
            state.prune();
        }
        if cfg.opacity_reset_enabled
            && cfg.opacity_reset_interval > 0
            && it.is_multiple_of(cfg.opacity_reset_interval)
        {
            state.reset_opacity();
        }
        log::debug!(
            "iteration {it}: loss {total:.6} ({} gaussians)",
            state.cloud.len()
        );
    }
    Ok(state)
}
