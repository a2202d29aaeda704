use rayon::prelude::*;

use super::{project_cloud, project_core, ProjectInput, RenderOutput, Renderer};
use crate::dual::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::sh;
use crate::types::{pixel_center, Camera, GaussianCloud};

/// Upstream gradient of a scalar loss with respect to every rendered channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrads {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub depth_plane: Vec<f64>,
    pub depth_accum: Vec<f64>,
    pub normals: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
}

impl PixelGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        PixelGrads {
            width,
            height,
            color: vec![[0.0; 3]; n],
            depth_plane: vec![0.0; n],
            depth_accum: vec![0.0; n],
            normals: vec![[0.0; 3]; n],
            alpha: vec![0.0; n],
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &PixelGrads, scale: f64) {
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            (0..3).for_each(|c| a[c] += scale * b[c]);
        }
        for (a, b) in self.normals.iter_mut().zip(&other.normals) {
            (0..3).for_each(|c| a[c] += scale * b[c]);
        }
        for (a, b) in self.depth_plane.iter_mut().zip(&other.depth_plane) {
            *a += scale * b;
        }
        for (a, b) in self.depth_accum.iter_mut().zip(&other.depth_accum) {
            *a += scale * b;
        }
        for (a, b) in self.alpha.iter_mut().zip(&other.alpha) {
            *a += scale * b;
        }
    }

    fn is_zero_at(&self, p: usize) -> bool {
        self.color[p] == [0.0; 3]
            && self.normals[p] == [0.0; 3]
            && self.depth_plane[p] == 0.0
            && self.depth_accum[p] == 0.0
            && self.alpha[p] == 0.0
    }
}

/// Loss gradient with respect to the stored (unconstrained) cloud parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrads {
    pub means: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
    /// Gradient with respect to the projected 2D mean, in pixels.
    pub mean2d: Vec<[f64; 2]>,
}

impl CloudGrads {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        CloudGrads {
            means: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh: vec![0.0; cloud.sh.len()],
            mean2d: vec![[0.0; 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn add_assign(&mut self, other: &CloudGrads) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            for (x, y) in a.iter_mut().zip(b) {
                (0..N).for_each(|i| x[i] += y[i]);
            }
        }
        add(&mut self.means, &other.means);
        add(&mut self.rotations, &other.rotations);
        add(&mut self.log_scales, &other.log_scales);
        add(&mut self.mean2d, &other.mean2d);
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += y;
        }
        for (x, y) in self.sh.iter_mut().zip(&other.sh) {
            *x += y;
        }
    }
}

// Layout of the per-Gaussian screen-space gradient.
const U: usize = 0;
const V: usize = 1;
const CONIC: usize = 2;
const OPACITY: usize = 5;
const COLOR: usize = 6;
const PLANE: usize = 9;
const DEPTH: usize = 10;
const NORMAL: usize = 11;
const SCREEN: usize = 14;

/// Independent geometric variables: mean(3), quaternion(4), log-scale(3).
const GEOM: usize = 10;

/// Upper bound on row chunks. Chunking depends only on the image height so
/// the summation order, and therefore the result, is independent of threads.
const MAX_CHUNKS: usize = 16;

pub(super) fn render_backward(
    renderer: &Renderer,
    cloud: &GaussianCloud,
    cam: &Camera,
    output: &RenderOutput,
    grads: &PixelGrads,
) -> Result<CloudGrads> {
    let (w, h) = cam.dims();
    if output.dims() != (w, h) {
        return Err(Error::dims((w, h), output.dims()));
    }
    if (grads.width, grads.height) != (w, h) {
        return Err(Error::dims((w, h), (grads.width, grads.height)));
    }
    let settings = renderer.settings();
    let projected = project_cloud(cloud, cam, settings, true)?;
    let mut slot = vec![usize::MAX; cloud.len()];
    for (k, g) in projected.iter().enumerate() {
        slot[g.index] = k;
    }

    let rows_per_chunk = h.div_ceil(MAX_CHUNKS).max(1);
    let chunks: Vec<(usize, usize)> = (0..h)
        .step_by(rows_per_chunk)
        .map(|y0| (y0, (y0 + rows_per_chunk).min(h)))
        .collect();
    let bg = settings.background;
    let alpha_max = settings.alpha_max;

    let chunk_grads = |&(y0, y1): &(usize, usize)| -> Vec<[f64; SCREEN]> {
        let mut acc = vec![[0.0; SCREEN]; projected.len()];
        for y in y0..y1 {
            for x in 0..w {
                let p = y * w + x;
                let list = output.contributors.pixel(p);
                if list.is_empty() || grads.is_zero_at(p) {
                    continue;
                }
                let (px, py) = pixel_center(x, y);
                let g_c = grads.color[p];
                let g_n = grads.normals[p];
                let (g_dp, g_da, g_a) =
                    (grads.depth_plane[p], grads.depth_accum[p], grads.alpha[p]);
                let t_final = list
                    .last()
                    .map_or(1.0, |c| c.transmittance * (1.0 - c.alpha));
                let mut suffix = t_final * (g_c[0] * bg[0] + g_c[1] * bg[1] + g_c[2] * bg[2]);
                for c in list.iter().rev() {
                    let gs = &projected[slot[c.index as usize]];
                    let a = &mut acc[slot[c.index as usize]];
                    let feature = g_c[0] * gs.color[0]
                        + g_c[1] * gs.color[1]
                        + g_c[2] * gs.color[2]
                        + g_dp * gs.plane_distance
                        + g_da * gs.depth
                        + g_n[0] * gs.normal[0]
                        + g_n[1] * gs.normal[1]
                        + g_n[2] * gs.normal[2]
                        + g_a;
                    let t = c.transmittance;
                    let d_alpha = t * feature - suffix / (1.0 - c.alpha);
                    suffix += t * c.alpha * feature;

                    let wgt = t * c.alpha;
                    for ch in 0..3 {
                        a[COLOR + ch] += wgt * g_c[ch];
                        a[NORMAL + ch] += wgt * g_n[ch];
                    }
                    a[PLANE] += wgt * g_dp;
                    a[DEPTH] += wgt * g_da;

                    if c.alpha >= alpha_max {
                        continue;
                    }
                    // alpha = o · exp(-P)
                    a[OPACITY] += d_alpha * c.alpha / gs.opacity;
                    let d_power = -c.alpha * d_alpha;
                    let dx = px - gs.mean[0];
                    let dy = py - gs.mean[1];
                    let [ca, cb, cc] = gs.conic;
                    a[U] -= d_power * (ca * dx + cb * dy);
                    a[V] -= d_power * (cb * dx + cc * dy);
                    a[CONIC] += d_power * 0.5 * dx * dx;
                    a[CONIC + 1] += d_power * dx * dy;
                    a[CONIC + 2] += d_power * 0.5 * dy * dy;
                }
            }
        }
        acc
    };

    let partials: Vec<Vec<[f64; SCREEN]>> = renderer.run(|| {
        if settings.threads > 1 {
            chunks.par_iter().map(chunk_grads).collect()
        } else {
            chunks.iter().map(chunk_grads).collect()
        }
    });
    let mut screen = vec![[0.0; SCREEN]; projected.len()];
    for part in &partials {
        for (s, p) in screen.iter_mut().zip(part) {
            for i in 0..SCREEN {
                s[i] += p[i];
            }
        }
    }

    let k = cloud.sh_coeffs();
    let per_gaussian = |(slot_idx, g): (usize, &[f64; SCREEN])| -> Option<(usize, ParamGrad)> {
        if g.iter().all(|v| *v == 0.0) {
            return None;
        }
        let i = projected[slot_idx].index;
        Some((i, chain_to_params(cloud, cam, settings.cov_blur, i, g, k)))
    };
    let param_grads: Vec<(usize, ParamGrad)> = renderer.run(|| {
        if settings.threads > 1 {
            screen
                .par_iter()
                .enumerate()
                .filter_map(per_gaussian)
                .collect()
        } else {
            screen.iter().enumerate().filter_map(per_gaussian).collect()
        }
    });

    let mut out = CloudGrads::zeros(cloud);
    let stride = cloud.sh_stride();
    for (i, pg) in param_grads {
        out.means[i] = [pg.geom[0], pg.geom[1], pg.geom[2]];
        out.rotations[i] = [pg.geom[3], pg.geom[4], pg.geom[5], pg.geom[6]];
        out.log_scales[i] = [pg.geom[7], pg.geom[8], pg.geom[9]];
        out.opacity_logits[i] = pg.opacity_logit;
        out.sh[i * stride..(i + 1) * stride].copy_from_slice(&pg.sh);
        out.mean2d[i] = pg.mean2d;
    }
    Ok(out)
}

struct ParamGrad {
    geom: [f64; GEOM],
    opacity_logit: f64,
    sh: Vec<f64>,
    mean2d: [f64; 2],
}

fn chain_to_params(
    cloud: &GaussianCloud,
    cam: &Camera,
    blur: f64,
    i: usize,
    g: &[f64; SCREEN],
    coeffs: usize,
) -> ParamGrad {
    type D = Dual<GEOM>;
    let m = cloud.means[i];
    let q = cloud.rotations[i];
    let s = cloud.log_scales[i];
    let input = ProjectInput {
        mean: [D::var(m[0], 0), D::var(m[1], 1), D::var(m[2], 2)],
        quat: [
            D::var(q[0], 3),
            D::var(q[1], 4),
            D::var(q[2], 5),
            D::var(q[3], 6),
        ],
        log_scale: [D::var(s[0], 7), D::var(s[1], 8), D::var(s[2], 9)],
    };
    let p = project_core(&input, cam, blur).expect("gaussian was visible in the forward pass");

    let mut geom = [0.0; GEOM];
    let mut push = |grad: f64, d: &D| {
        if grad != 0.0 {
            for (o, e) in geom.iter_mut().zip(d.eps) {
                *o += grad * e;
            }
        }
    };
    push(g[U], &p.u);
    push(g[V], &p.v);
    for c in 0..3 {
        push(g[CONIC + c], &p.conic[c]);
        push(g[NORMAL + c], &p.normal[c]);
    }
    push(g[PLANE], &p.plane);
    push(g[DEPTH], &p.z);

    let coeff_values = cloud.sh_of(i);
    let mut basis = vec![D::cst(0.0); coeffs];
    sh::basis(cloud.sh_degree(), p.dir, &mut basis);
    let mut sh_grad = vec![0.0; coeffs * 3];
    for (kk, b) in basis.iter().enumerate() {
        let mut g_basis = 0.0;
        for ch in 0..3 {
            sh_grad[kk * 3 + ch] = g[COLOR + ch] * b.re();
            g_basis += g[COLOR + ch] * coeff_values[kk * 3 + ch];
        }
        if kk > 0 {
            push(g_basis, b);
        }
    }

    let o = cloud.opacity(i);
    ParamGrad {
        geom,
        opacity_logit: g[OPACITY] * o * (1.0 - o),
        sh: sh_grad,
        mean2d: [g[U], g[V]],
    }
}
