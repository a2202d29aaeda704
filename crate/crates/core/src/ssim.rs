//! Structural similarity with an 11×11 Gaussian window (σ = 1.5) and its
//! gradient. Near the image border the window is truncated to the image and
//! renormalized.

use crate::error::Result;
use crate::types::{check_dims, ImageBuffer};

pub const WINDOW_RADIUS: usize = 5;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const C1: f64 = K1 * K1;
pub const C2: f64 = K2 * K2;

fn kernel() -> [f64; 2 * WINDOW_RADIUS + 1] {
    std::array::from_fn(|k| {
        let d = k as f64 - WINDOW_RADIUS as f64;
        (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()
    })
}

/// Truncated, renormalized 1D Gaussian filter along a line of `len` samples.
struct Filter1d {
    len: usize,
    /// `weights[i]` holds the normalized taps for output sample `i`, starting
    /// at input index `start[i]`.
    start: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

impl Filter1d {
    fn new(len: usize) -> Self {
        let k = kernel();
        let r = WINDOW_RADIUS as isize;
        let mut start = Vec::with_capacity(len);
        let mut weights = Vec::with_capacity(len);
        for i in 0..len as isize {
            let lo = (i - r).max(0);
            let hi = (i + r).min(len as isize - 1);
            let taps: Vec<f64> = (lo..=hi).map(|j| k[(j - i + r) as usize]).collect();
            let sum: f64 = taps.iter().sum();
            start.push(lo as usize);
            weights.push(taps.into_iter().map(|w| w / sum).collect());
        }
        Filter1d {
            len,
            start,
            weights,
        }
    }

    fn apply(&self, input: &[f64], stride: usize, out: &mut [f64]) {
        for i in 0..self.len {
            let s = self.start[i];
            out[i * stride] = self.weights[i]
                .iter()
                .enumerate()
                .map(|(k, w)| w * input[(s + k) * stride])
                .sum();
        }
    }

    fn apply_adjoint(&self, input: &[f64], stride: usize, out: &mut [f64]) {
        for i in 0..self.len {
            out[i * stride] = 0.0;
        }
        for i in 0..self.len {
            let s = self.start[i];
            let g = input[i * stride];
            for (k, w) in self.weights[i].iter().enumerate() {
                out[(s + k) * stride] += w * g;
            }
        }
    }
}

/// Separable 2D window over a `width × height` single-channel plane.
struct Window {
    width: usize,
    height: usize,
    rows: Filter1d,
    cols: Filter1d,
}

impl Window {
    fn new(width: usize, height: usize) -> Self {
        Window {
            width,
            height,
            rows: Filter1d::new(width),
            cols: Filter1d::new(height),
        }
    }

    fn run(&self, input: &[f64], adjoint: bool) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0; w * h];
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let row = &input[y * w..(y + 1) * w];
            let dst = &mut tmp[y * w..(y + 1) * w];
            if adjoint {
                self.rows.apply_adjoint(row, 1, dst);
            } else {
                self.rows.apply(row, 1, dst);
            }
        }
        for x in 0..w {
            if adjoint {
                self.cols.apply_adjoint(&tmp[x..], w, &mut out[x..]);
            } else {
                self.cols.apply(&tmp[x..], w, &mut out[x..]);
            }
        }
        out
    }

    fn filter(&self, input: &[f64]) -> Vec<f64> {
        self.run(input, false)
    }

    fn filter_adjoint(&self, input: &[f64]) -> Vec<f64> {
        self.run(input, true)
    }
}

/// Per-pixel, per-channel window statistics of one channel pair.
struct Stats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
}

fn stats(win: &Window, x: &[f64], y: &[f64]) -> Stats {
    let mu_x = win.filter(x);
    let mu_y = win.filter(y);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exx = win.filter(&xx);
    let eyy = win.filter(&yy);
    let exy = win.filter(&xy);
    let n = x.len();
    let mut var_x = vec![0.0; n];
    let mut var_y = vec![0.0; n];
    let mut cov = vec![0.0; n];
    for i in 0..n {
        var_x[i] = exx[i] - mu_x[i] * mu_x[i];
        var_y[i] = eyy[i] - mu_y[i] * mu_y[i];
        cov[i] = exy[i] - mu_x[i] * mu_y[i];
    }
    Stats {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov,
    }
}

fn channel(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.values.iter().map(|v| v[c]).collect()
}

/// SSIM map, one value per pixel and channel.
pub fn ssim_map(a: &ImageBuffer, b: &ImageBuffer) -> Result<Vec<[f64; 3]>> {
    check_dims(a.dims(), b.dims())?;
    let win = Window::new(a.width, a.height);
    let mut out = vec![[0.0; 3]; a.values.len()];
    for c in 0..3 {
        let s = stats(&win, &channel(a, c), &channel(b, c));
        for (i, o) in out.iter_mut().enumerate() {
            let num = (2.0 * s.mu_x[i] * s.mu_y[i] + C1) * (2.0 * s.cov[i] + C2);
            let den = (s.mu_x[i] * s.mu_x[i] + s.mu_y[i] * s.mu_y[i] + C1)
                * (s.var_x[i] + s.var_y[i] + C2);
            o[c] = num / den;
        }
    }
    Ok(out)
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let map = ssim_map(a, b)?;
    if map.is_empty() {
        return Ok(1.0);
    }
    Ok(map.iter().flatten().sum::<f64>() / (3 * map.len()) as f64)
}

/// Gradient with respect to `a` of `Σ upstream · ssim_map(a, b)`.
pub fn ssim_backward(
    a: &ImageBuffer,
    b: &ImageBuffer,
    upstream: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    check_dims(a.dims(), b.dims())?;
    let win = Window::new(a.width, a.height);
    let n = a.values.len();
    let mut out = vec![[0.0; 3]; n];
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let s = stats(&win, &x, &y);
        let mut g_mu = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        for i in 0..n {
            let (mx, my) = (s.mu_x[i], s.mu_y[i]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * s.cov[i] + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = s.var_x[i] + s.var_y[i] + C2;
            let v = a1 * a2 / (b1 * b2);
            let g = upstream[i][c];
            let d_cov = 2.0 * v / a2;
            let d_var = -v / b2;
            g_mu[i] = g * (v * (2.0 * my / a1 - 2.0 * mx / b1) - d_cov * my - 2.0 * d_var * mx);
            g_xx[i] = g * d_var;
            g_xy[i] = g * d_cov;
        }
        let t_mu = win.filter_adjoint(&g_mu);
        let t_xx = win.filter_adjoint(&g_xx);
        let t_xy = win.filter_adjoint(&g_xy);
        for i in 0..n {
            out[i][c] = t_mu[i] + 2.0 * x[i] * t_xx[i] + y[i] * t_xy[i];
        }
    }
    Ok(out)
}
