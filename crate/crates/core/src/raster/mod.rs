//! CPU reference rasterizer for flattened Gaussians.
//!
//! Gaussians are projected with the first-order pinhole Jacobian, sorted once
//! by view-space depth of their centers and alpha-composited front to back per
//! pixel. Besides color the renderer composites plane distances, center depths
//! and camera-frame normals, and records each pixel's contributors so the
//! backward pass can replay the compositing in reverse.

mod backward;
mod project;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sh;
use crate::types::{
    pixel_center, Camera, DepthMap, DepthSemantics, GaussianCloud, ImageBuffer, NormalMap,
};

pub use backward::{CloudGrads, PixelGrads};
pub(crate) use project::{project_core, ProjectInput};

/// Numerical constants of the compositing rule.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Contributions with smaller alpha are skipped.
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Compositing stops once transmittance drops below this; 0 disables.
    pub transmittance_min: f64,
    /// Added to the diagonal of every 2D covariance, in pixel².
    pub cov_blur: f64,
    /// Minimum footprint half-extent in standard deviations.
    pub footprint_sigmas: f64,
    pub threads: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: [0.0; 3],
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.99,
            transmittance_min: 1e-4,
            cov_blur: 0.3,
            footprint_sigmas: 3.0,
            threads: 1,
        }
    }
}

impl RenderSettings {
    /// Settings under which the image is a smooth function of the parameters
    /// (no alpha floor, no early termination). Used for gradient checking.
    pub fn smooth() -> Self {
        RenderSettings {
            alpha_min: 0.0,
            transmittance_min: 0.0,
            ..Default::default()
        }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }
}

/// A Gaussian after projection into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub index: usize,
    /// 2D mean in pixels.
    pub mean: [f64; 2],
    /// `J W Σ Wᵀ Jᵀ`, symmetric, without regularization.
    pub cov: [[f64; 2]; 2],
    /// Inverse of the regularized covariance: (xx, xy, yy).
    pub conic: [f64; 3],
    /// View-space z of the center.
    pub depth: f64,
    /// Distance from the camera center to the Gaussian's plane.
    pub plane_distance: f64,
    /// Camera-frame unit normal, facing the camera.
    pub normal: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    /// Inclusive pixel range `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
}

impl ProjectedGaussian {
    /// Mahalanobis power `½ Δᵀ Σ'⁻¹ Δ` at pixel center `(px, py)`.
    #[inline]
    pub fn power(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        0.5 * (self.conic[0] * dx * dx + self.conic[2] * dy * dy) + self.conic[1] * dx * dy
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contributor {
    pub index: u32,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
}

/// Per-pixel contributor lists in compressed-row form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Contributors {
    offsets: Vec<usize>,
    entries: Vec<Contributor>,
}

impl Contributors {
    pub fn pixel(&self, p: usize) -> &[Contributor] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn pixel_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn total(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    pub depth_plane: DepthMap,
    pub depth_accum: DepthMap,
    pub normals: NormalMap,
    pub alpha: Vec<f64>,
    pub contributors: Contributors,
}

impl RenderOutput {
    pub fn dims(&self) -> (usize, usize) {
        self.color.dims()
    }

    /// Bitwise equality of every channel (NaN-aware) and of the contributor lists.
    pub fn bit_identical(&self, other: &RenderOutput) -> bool {
        fn bits(v: &[f64]) -> impl Iterator<Item = u64> + '_ {
            v.iter().map(|x| x.to_bits())
        }
        fn bits3(v: &[[f64; 3]]) -> impl Iterator<Item = u64> + '_ {
            v.iter().flatten().map(|x| x.to_bits())
        }
        self.dims() == other.dims()
            && bits3(&self.color.values).eq(bits3(&other.color.values))
            && bits3(&self.normals.values).eq(bits3(&other.normals.values))
            && bits(&self.depth_plane.values).eq(bits(&other.depth_plane.values))
            && bits(&self.depth_accum.values).eq(bits(&other.depth_accum.values))
            && bits(&self.alpha).eq(bits(&other.alpha))
            && self.contributors == other.contributors
    }

    /// View-space z normalized by coverage (`D_accum / alpha`), the quantity
    /// comparable to an externally estimated depth map.
    pub fn normalized_depth(&self) -> DepthMap {
        let values = self
            .depth_accum
            .values
            .iter()
            .zip(&self.alpha)
            .map(|(d, a)| {
                if d.is_nan() || *a <= 0.0 {
                    f64::NAN
                } else {
                    d / a
                }
            })
            .collect();
        DepthMap {
            width: self.depth_accum.width,
            height: self.depth_accum.height,
            values,
            semantics: DepthSemantics::Estimated,
        }
    }
}

/// Renderer with fixed settings and an optional worker pool.
pub struct Renderer {
    settings: RenderSettings,
    pool: Option<rayon::ThreadPool>,
}

impl Default for Renderer {
    fn default() -> Self {
        Renderer::new(RenderSettings::default())
    }
}

impl Renderer {
    pub fn new(settings: RenderSettings) -> Self {
        let pool = (settings.threads > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(settings.threads)
                .build()
                .expect("failed to build render thread pool")
        });
        Renderer { settings, pool }
    }

    pub fn settings(&self) -> &RenderSettings {
        &self.settings
    }

    fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    /// Projects and culls the cloud; output is in Gaussian index order.
    pub fn project(&self, cloud: &GaussianCloud, cam: &Camera) -> Result<Vec<ProjectedGaussian>> {
        project_cloud(cloud, cam, &self.settings, true)
    }

    pub fn render(&self, cloud: &GaussianCloud, cam: &Camera) -> Result<RenderOutput> {
        let projected = self.project(cloud, cam)?;
        let order = depth_order(&projected);
        let (w, h) = cam.dims();

        // Row buckets of depth-sorted candidates.
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
        for &k in &order {
            let g = &projected[k];
            for row in &mut rows[g.bbox.1..=g.bbox.3] {
                row.push(k as u32);
            }
        }

        let settings = &self.settings;
        let shade_row = |y: usize| -> RowOutput {
            let mut out = RowOutput::new(w);
            for x in 0..w {
                let candidates = rows[y]
                    .iter()
                    .map(|&k| &projected[k as usize])
                    .filter(|g| x >= g.bbox.0 && x <= g.bbox.2);
                composite(x, y, candidates, settings, &mut out);
            }
            out
        };
        let row_outputs: Vec<RowOutput> = if self.pool.is_some() {
            self.run(|| (0..h).into_par_iter().map(shade_row).collect())
        } else {
            (0..h).map(shade_row).collect()
        };
        Ok(assemble(w, h, row_outputs, settings))
    }

    /// Oracle renderer: every Gaussian inside the depth range is evaluated at
    /// every pixel, with no footprint culling and no early termination.
    pub fn render_bruteforce(&self, cloud: &GaussianCloud, cam: &Camera) -> Result<RenderOutput> {
        let projected = project_cloud(cloud, cam, &self.settings, false)?;
        let order = depth_order(&projected);
        let (w, h) = cam.dims();
        let s = &self.settings;
        let mut rows = Vec::with_capacity(h);
        for y in 0..h {
            let mut out = RowOutput::new(w);
            for x in 0..w {
                let (px, py) = pixel_center(x, y);
                let mut t = 1.0;
                let mut acc = [0.0f64; 9];
                let start = out.contributors.len();
                for &k in &order {
                    let g = &projected[k];
                    let dx = px - g.mean[0];
                    let dy = py - g.mean[1];
                    let power =
                        0.5 * (g.conic[0] * dx * dx + g.conic[2] * dy * dy) + g.conic[1] * dx * dy;
                    let alpha = (g.opacity * (-power).exp()).min(s.alpha_max);
                    if alpha < s.alpha_min || alpha <= 0.0 {
                        continue;
                    }
                    let wgt = alpha * t;
                    for c in 0..3 {
                        acc[c] += wgt * g.color[c];
                        acc[5 + c] += wgt * g.normal[c];
                    }
                    acc[3] += wgt * g.plane_distance;
                    acc[4] += wgt * g.depth;
                    acc[8] += wgt;
                    out.contributors.push(Contributor {
                        index: g.index as u32,
                        alpha,
                        transmittance: t,
                    });
                    t *= 1.0 - alpha;
                }
                out.push_pixel(acc, t, out.contributors.len() - start, s);
            }
            rows.push(out);
        }
        Ok(assemble(w, h, rows, s))
    }

    pub fn render_backward(
        &self,
        cloud: &GaussianCloud,
        cam: &Camera,
        output: &RenderOutput,
        grads: &PixelGrads,
    ) -> Result<CloudGrads> {
        backward::render_backward(self, cloud, cam, output, grads)
    }
}

/// Renders with default settings on the calling thread.
pub fn render(cloud: &GaussianCloud, cam: &Camera) -> Result<RenderOutput> {
    Renderer::default().render(cloud, cam)
}

pub fn project(cloud: &GaussianCloud, cam: &Camera) -> Result<Vec<ProjectedGaussian>> {
    Renderer::default().project(cloud, cam)
}

/// Indices into `projected` sorted by center depth, ties by Gaussian index.
fn depth_order(projected: &[ProjectedGaussian]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| {
        projected[a]
            .depth
            .total_cmp(&projected[b].depth)
            .then(projected[a].index.cmp(&projected[b].index))
    });
    order
}

pub(crate) fn project_cloud(
    cloud: &GaussianCloud,
    cam: &Camera,
    s: &RenderSettings,
    cull: bool,
) -> Result<Vec<ProjectedGaussian>> {
    let k = cloud.sh_coeffs();
    let mut basis = vec![0.0; k];
    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let input = ProjectInput {
            mean: cloud.means[i],
            quat: cloud.rotations[i],
            log_scale: cloud.log_scales[i],
        };
        let Some(p) = project_core::<f64>(&input, cam, s.cov_blur) else {
            continue;
        };
        let finite = p.conic.iter().chain(&p.cov).all(|v| v.is_finite());
        if !(p.det > 0.0 && p.det.is_finite() && finite) {
            return Err(Error::SingularFootprint { index: i });
        }
        let opacity = cloud.opacity(i);
        sh::basis(cloud.sh_degree(), p.dir, &mut basis);
        let color = sh::eval_color(cloud.sh_of(i), &basis);

        let full = (0, 0, cam.width - 1, cam.height - 1);
        let bbox = if cull {
            match footprint(&p, opacity, cam, s) {
                Some(b) => b,
                None => continue,
            }
        } else {
            full
        };
        out.push(ProjectedGaussian {
            index: i,
            mean: [p.u, p.v],
            cov: [[p.cov[0], p.cov[1]], [p.cov[1], p.cov[2]]],
            conic: p.conic,
            depth: p.z,
            plane_distance: p.plane,
            normal: p.normal,
            opacity,
            color,
            bbox,
        });
    }
    Ok(out)
}

/// Pixel range that can receive `alpha >= alpha_min`, or at least the
/// `footprint_sigmas` ellipse. `None` when it misses the image.
fn footprint(
    p: &project::ProjectedCore<f64>,
    opacity: f64,
    cam: &Camera,
    s: &RenderSettings,
) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let full = Some((0, 0, cam.width - 1, cam.height - 1));
    if s.alpha_min <= 0.0 {
        return full;
    }
    if opacity < s.alpha_min {
        return None;
    }
    // alpha >= alpha_min  <=>  Mahalanobis² <= 2 ln(opacity / alpha_min)
    let r2 = (s.footprint_sigmas * s.footprint_sigmas).max(2.0 * (opacity / s.alpha_min).ln());
    let r = r2.sqrt() * (1.0 + 1e-9) + 1e-9;
    let hx = r * (p.cov[0] + s.cov_blur).sqrt();
    let hy = r * (p.cov[2] + s.cov_blur).sqrt();
    let x0 = (p.u - hx - 0.5).ceil().max(0.0);
    let x1 = (p.u + hx - 0.5).floor().min(w - 1.0);
    let y0 = (p.v - hy - 0.5).ceil().max(0.0);
    let y1 = (p.v + hy - 0.5).floor().min(h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

struct RowOutput {
    /// color(3), plane, accum, normal(3), alpha per pixel.
    values: Vec<[f64; 9]>,
    counts: Vec<usize>,
    contributors: Vec<Contributor>,
}

impl RowOutput {
    fn new(w: usize) -> Self {
        RowOutput {
            values: Vec::with_capacity(w),
            counts: Vec::with_capacity(w),
            contributors: Vec::new(),
        }
    }

    fn push_pixel(&mut self, mut acc: [f64; 9], t: f64, count: usize, s: &RenderSettings) {
        for c in 0..3 {
            acc[c] += t * s.background[c];
        }
        if count == 0 {
            acc[3] = f64::NAN;
            acc[4] = f64::NAN;
        }
        acc[8] = 1.0 - t;
        self.values.push(acc);
        self.counts.push(count);
    }
}

fn composite<'a>(
    x: usize,
    y: usize,
    candidates: impl Iterator<Item = &'a ProjectedGaussian>,
    s: &RenderSettings,
    out: &mut RowOutput,
) {
    let (px, py) = pixel_center(x, y);
    let mut t = 1.0f64;
    let mut acc = [0.0f64; 9];
    let start = out.contributors.len();
    for g in candidates {
        if t < s.transmittance_min {
            break;
        }
        let alpha = (g.opacity * (-g.power(px, py)).exp()).min(s.alpha_max);
        if alpha < s.alpha_min || alpha <= 0.0 {
            continue;
        }
        let wgt = alpha * t;
        for c in 0..3 {
            acc[c] += wgt * g.color[c];
            acc[5 + c] += wgt * g.normal[c];
        }
        acc[3] += wgt * g.plane_distance;
        acc[4] += wgt * g.depth;
        out.contributors.push(Contributor {
            index: g.index as u32,
            alpha,
            transmittance: t,
        });
        t *= 1.0 - alpha;
    }
    let count = out.contributors.len() - start;
    out.push_pixel(acc, t, count, s);
}

fn assemble(w: usize, h: usize, rows: Vec<RowOutput>, _s: &RenderSettings) -> RenderOutput {
    let n = w * h;
    let mut color = Vec::with_capacity(n);
    let mut plane = Vec::with_capacity(n);
    let mut accum = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n + 1);
    let total = rows.iter().map(|r| r.contributors.len()).sum();
    let mut entries = Vec::with_capacity(total);
    offsets.push(0);
    for row in rows {
        for (v, count) in row.values.iter().zip(&row.counts) {
            color.push([v[0], v[1], v[2]]);
            plane.push(v[3]);
            accum.push(v[4]);
            normals.push([v[5], v[6], v[7]]);
            alpha.push(v[8]);
            offsets.push(offsets.last().unwrap() + count);
        }
        entries.extend(row.contributors);
    }
    RenderOutput {
        color: ImageBuffer {
            width: w,
            height: h,
            values: color,
        },
        depth_plane: DepthMap {
            width: w,
            height: h,
            values: plane,
            semantics: DepthSemantics::PlaneDistance,
        },
        depth_accum: DepthMap {
            width: w,
            height: h,
            values: accum,
            semantics: DepthSemantics::AccumulatedZ,
        },
        normals: NormalMap {
            width: w,
            height: h,
            values: normals,
        },
        alpha,
        contributors: Contributors { offsets, entries },
    }
}

#[cfg(test)]
mod tests;
