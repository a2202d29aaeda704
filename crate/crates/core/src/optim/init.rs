//! Cloud initialization from a colored point set.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::sh;
use crate::types::{logit, Camera, Gaussian, GaussianCloud};

/// Initial activated opacity of every Gaussian.
pub const INITIAL_OPACITY: f64 = 0.1;
/// Lower clamp of the initial scale.
pub const MIN_INITIAL_SCALE: f64 = 1e-4;

/// Radius of the camera rig: 1.1 times the largest distance of a camera
/// center from their centroid, or 1 when all centers coincide.
pub fn scene_extent(cams: &[Camera]) -> f64 {
    if cams.is_empty() {
        return 1.0;
    }
    let centroid = cams.iter().map(|c| c.center).sum::<Vector3<f64>>() / cams.len() as f64;
    let r = cams
        .iter()
        .map(|c| (c.center - centroid).norm())
        .fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Uniform-grid index answering k-nearest-neighbor queries over a fixed point set.
pub struct PointGrid<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    origin: Vector3<f64>,
    cells: HashMap<[i64; 3], Vec<usize>>,
    max_ring: i64,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let span = if points.is_empty() {
            Vector3::zeros()
        } else {
            hi - lo
        };
        let longest = span.max();
        let volume = span.iter().map(|s| s.max(longest * 1e-3)).product::<f64>();
        let mut cell = (volume / points.len().max(1) as f64).cbrt() * 2.0;
        if !(cell.is_finite() && cell > 0.0) {
            cell = 1.0;
        }
        let origin = if points.is_empty() {
            Vector3::zeros()
        } else {
            lo
        };
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut grid = PointGrid {
            points,
            cell,
            origin,
            cells: HashMap::new(),
            max_ring: 0,
        };
        for (i, p) in points.iter().enumerate() {
            cells.entry(grid.key(p)).or_default().push(i);
        }
        grid.max_ring = (longest / cell).ceil() as i64 + 1;
        grid.cells = cells;
        grid
    }

    fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        let q = (p - self.origin) / self.cell;
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    }

    /// Distances to the `k` nearest other points of the set, ascending. Fewer
    /// are returned when the set is smaller than `k + 1`.
    pub fn nearest_distances(&self, index: usize, k: usize) -> Vec<f64> {
        let q = self.points[index];
        let c = self.key(&q);
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        for r in 0..=self.max_ring {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let Some(list) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        for &j in list {
                            if j == index {
                                continue;
                            }
                            let d = (self.points[j] - q).norm();
                            let pos = best.partition_point(|b| *b <= d);
                            if pos < k {
                                best.insert(pos, d);
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
            // Points outside ring r are at least r cells away.
            if best.len() == k && best[k - 1] <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// One Gaussian per point: isotropic scale from the mean distance to the
/// three nearest points (clamped to `[1e-4, extent]`), opacity 0.1, identity
/// rotation and the point color as the constant SH term.
pub fn init_from_points(
    points: &[(Vector3<f64>, [f64; 3])],
    cams: &[Camera],
    sh_degree: usize,
) -> Result<GaussianCloud> {
    if points.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    let extent = scene_extent(cams).max(MIN_INITIAL_SCALE);
    let positions: Vec<Vector3<f64>> = points.iter().map(|p| p.0).collect();
    let grid = PointGrid::new(&positions);
    let mut cloud = GaussianCloud::new(sh_degree)?;
    let stride = cloud.sh_stride();
    for (i, (p, rgb)) in points.iter().enumerate() {
        let d = grid.nearest_distances(i, 3);
        let mean_d = if d.is_empty() {
            MIN_INITIAL_SCALE
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        };
        let s = mean_d.clamp(MIN_INITIAL_SCALE, extent);
        let mut coeffs = vec![0.0; stride];
        for c in 0..3 {
            coeffs[c] = sh::rgb_to_dc(rgb[c]);
        }
        cloud.push(Gaussian {
            mean: [p.x, p.y, p.z],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [s.ln(); 3],
            opacity_logit: logit(INITIAL_OPACITY),
            sh: coeffs,
        })?;
    }
    Ok(cloud)
}
