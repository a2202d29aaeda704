//! Depth-map geometry: normals from depth, patch-border masks, confidence
//! filtering, forward warping, circle-interpolated pseudo cameras and
//! trajectory alignment.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::types::{
    check_dims, pixel_center, Camera, ConfidenceMap, DepthMap, DepthSemantics, ImageBuffer,
    NormalMap, PixelMask,
};

/// Default cell size of the patch-border mask.
pub const PATCH_SIZE: usize = 14;
/// Default confidence threshold for points and warped pixels.
pub const CONFIDENCE_THRESHOLD: f64 = 0.2;

/// Per-pixel normals from a z-depth map.
///
/// Each pixel and its x / y neighbors are unprojected; the normal is the
/// normalized cross product of the two difference vectors, facing the camera.
/// Along each axis the one-sided difference with the smaller depth change is
/// used, the forward one on ties. A pixel with no valid neighbor along an
/// axis, or a NaN depth itself, gets a zero normal.
pub fn normals_from_depth(depth: &DepthMap, cam: &Camera) -> Result<NormalMap> {
    check_dims(cam.dims(), depth.dims())?;
    if depth.semantics == DepthSemantics::PlaneDistance {
        return Err(Error::WrongDepthSemantics {
            actual: depth.semantics,
            expected: "AccumulatedZ or Estimated",
        });
    }
    let (w, h) = depth.dims();
    let point = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let z = depth.get(x, y);
        if z.is_nan() {
            return None;
        }
        let (u, v) = pixel_center(x, y);
        Some(cam.unproject(u, v, z))
    };
    let mut out = NormalMap::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let Some(center) = point(x, y) else { continue };
            // One-sided differences; the side with the smaller depth jump
            // keeps the normal on one surface at occlusion edges.
            let pick = |fwd: Option<Vector3<f64>>, bwd: Option<Vector3<f64>>| match (fwd, bwd) {
                (Some(f), Some(b)) => Some(if (f.z - center.z).abs() <= (center.z - b.z).abs() {
                    f - center
                } else {
                    center - b
                }),
                (Some(f), None) => Some(f - center),
                (None, Some(b)) => Some(center - b),
                (None, None) => None,
            };
            let dx = pick(
                (x + 1 < w).then(|| point(x + 1, y)).flatten(),
                (x > 0).then(|| point(x - 1, y)).flatten(),
            );
            let dy = pick(
                (y + 1 < h).then(|| point(x, y + 1)).flatten(),
                (y > 0).then(|| point(x, y - 1)).flatten(),
            );
            let (Some(dx), Some(dy)) = (dx, dy) else {
                continue;
            };
            let Some(mut n) = dx.cross(&dy).try_normalize(0.0) else {
                continue;
            };
            if n.dot(&center) > 0.0 {
                n = -n;
            }
            out.set(x, y, [n.x, n.y, n.z]);
        }
    }
    Ok(out)
}

/// Per-pixel plane distance `d = -n·X` of the back-projected depth point `X`
/// under the given camera-space normals. NaN where the depth is NaN, the
/// normal is missing (zero) or the plane does not face the camera.
pub fn plane_distance_from_depth(
    depth: &DepthMap,
    normals: &NormalMap,
    cam: &Camera,
) -> Result<DepthMap> {
    check_dims(cam.dims(), depth.dims())?;
    check_dims(cam.dims(), normals.dims())?;
    let (w, h) = depth.dims();
    let mut out = DepthMap::invalid(w, h, DepthSemantics::PlaneDistance);
    for y in 0..h {
        for x in 0..w {
            let z = depth.get(x, y);
            let n = Vector3::from(normals.get(x, y));
            if z.is_nan() || n == Vector3::zeros() {
                continue;
            }
            let (u, v) = pixel_center(x, y);
            let d = -n.dot(&cam.unproject(u, v, z));
            if d >= 0.0 {
                out.set(x, y, d);
            }
        }
    }
    Ok(out)
}

/// Mask that drops the 1-pixel inner border of every `patch × patch` cell
/// (cells anchored at the origin, clipped at the right and bottom edges).
pub fn patch_border_mask(width: usize, height: usize, patch: usize) -> Result<PixelMask> {
    if width == 0 || height == 0 || patch == 0 {
        return Err(Error::ValueRange(format!(
            "mask size {width}x{height} with patch {patch} must be positive"
        )));
    }
    let on_border = |i: usize, len: usize| {
        let start = i / patch * patch;
        let end = (start + patch).min(len) - 1;
        i == start || i == end
    };
    let mut mask = PixelMask::filled(width, height, true);
    for y in 0..height {
        for x in 0..width {
            if on_border(x, width) || on_border(y, height) {
                mask.set(x, y, false);
            }
        }
    }
    Ok(mask)
}

/// Keeps the items whose confidence is at least `threshold`, in order.
pub fn filter_points<T: Clone>(
    points: &[T],
    confidences: &[f64],
    threshold: f64,
) -> Result<Vec<T>> {
    if points.len() != confidences.len() {
        return Err(Error::LengthMismatch {
            left: points.len(),
            right: confidences.len(),
        });
    }
    Ok(points
        .iter()
        .zip(confidences)
        .filter(|(_, c)| **c >= threshold)
        .map(|(p, _)| p.clone())
        .collect())
}

/// Forward-warps a source view into `dst_cam`.
///
/// Every source pixel with confidence `>= conf_threshold` and finite depth is
/// unprojected, reprojected into the destination and splatted onto the
/// nearest pixel. The nearest destination depth wins; on exact ties the
/// earlier source pixel (raster order) wins. Pixels receiving nothing are
/// black and `false` in the returned mask.
pub fn warp(
    src_img: &ImageBuffer,
    src_depth: &DepthMap,
    src_conf: &ConfidenceMap,
    src_cam: &Camera,
    dst_cam: &Camera,
    conf_threshold: f64,
) -> Result<(ImageBuffer, PixelMask)> {
    let dims = src_cam.dims();
    check_dims(dims, src_img.dims())?;
    check_dims(dims, src_depth.dims())?;
    check_dims(dims, src_conf.dims())?;
    let (dw, dh) = dst_cam.dims();
    let mut image = ImageBuffer::filled(dw, dh, [0.0; 3]);
    let mut zbuf = vec![f64::INFINITY; dw * dh];
    let mut mask = PixelMask::filled(dw, dh, false);
    for y in 0..src_cam.height {
        for x in 0..src_cam.width {
            let z = src_depth.get(x, y);
            if !z.is_finite() || !(src_conf.get(x, y) >= conf_threshold) {
                continue;
            }
            let (u, v) = pixel_center(x, y);
            let world = src_cam.camera_to_world(&src_cam.unproject(u, v, z));
            let p = dst_cam.world_to_camera(&world);
            if !(p.z > dst_cam.near && p.z < dst_cam.far) {
                continue;
            }
            let (du, dv) = dst_cam.project(&p);
            let (fx, fy) = (du.floor(), dv.floor());
            if !(fx >= 0.0 && fy >= 0.0 && fx < dw as f64 && fy < dh as f64) {
                continue;
            }
            let k = fy as usize * dw + fx as usize;
            if p.z < zbuf[k] {
                zbuf[k] = p.z;
                image.values[k] = src_img.get(x, y);
                mask.values[k] = true;
            }
        }
    }
    Ok((image, mask))
}

/// Point at fraction `t` along the minor arc from `a` to `b` of the circle
/// through `a`, `b` and `c`. Nearly collinear triples (circumradius above
/// 10⁶ times the largest pairwise distance) interpolate linearly instead.
pub fn circle_interpolate(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
    t: f64,
) -> Result<Vector3<f64>> {
    if ![a, b, c].iter().all(|p| p.iter().all(|v| v.is_finite())) || !t.is_finite() {
        return Err(Error::DegenerateInput("non-finite circle input".into()));
    }
    let (ab, ac, bc) = ((b - a).norm(), (c - a).norm(), (c - b).norm());
    if ab <= 1e-12 || ac <= 1e-12 || bc <= 1e-12 {
        return Err(Error::DegenerateInput("two circle points coincide".into()));
    }
    if t == 0.0 {
        return Ok(*a);
    }
    if t == 1.0 {
        return Ok(*b);
    }
    let linear = a + (b - a) * t;
    let Some(circle) = Circle::through(a, b, c) else {
        return Ok(linear);
    };
    let max_dist = ab.max(ac).max(bc);
    if circle.radius > 1e6 * max_dist {
        return Ok(linear);
    }
    let u = a - circle.center;
    let v = b - circle.center;
    let angle = u.cross(&v).dot(&circle.normal).atan2(u.dot(&v));
    let rot =
        UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_unchecked(circle.normal), t * angle);
    Ok(circle.center + rot * u)
}

/// Circle through three points in 3D.
#[derive(Debug, Clone, PartialEq)]
pub struct Circle {
    pub center: Vector3<f64>,
    pub radius: f64,
    /// Unit normal of the circle's plane, `(b − a) × (c − a)` normalized.
    pub normal: Vector3<f64>,
}

impl Circle {
    /// `None` for exactly collinear points.
    pub fn through(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<Circle> {
        let ab = b - a;
        let ac = c - a;
        let n = ab.cross(&ac);
        let n2 = n.norm_squared();
        if n2 == 0.0 || !n2.is_finite() {
            return None;
        }
        let offset =
            (n.cross(&ab) * ac.norm_squared() + ac.cross(&n) * ab.norm_squared()) / (2.0 * n2);
        Some(Circle {
            center: a + offset,
            radius: offset.norm(),
            normal: n / n2.sqrt(),
        })
    }
}

/// A pseudo camera and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoCamera {
    pub camera: Camera,
    /// Real camera the pseudo view is generated for (and warped from).
    pub source: usize,
    pub neighbor: usize,
    pub t: f64,
}

/// Camera between `target` and `neighbor`: the center moves along the circle
/// through both centers and `third`, the orientation is slerped, intrinsics
/// are copied from `target`.
pub fn interpolate_camera(
    target: &Camera,
    neighbor: &Camera,
    third: &Vector3<f64>,
    t: f64,
) -> Result<Camera> {
    let center = circle_interpolate(&target.center, &neighbor.center, third, t)?;
    let qa = target.orientation();
    let qb = neighbor.orientation();
    let q = qa.try_slerp(&qb, t, 1e-12).unwrap_or(qa);
    let rotation = if t == 0.0 {
        target.rotation
    } else if t == 1.0 {
        neighbor.rotation
    } else {
        q.to_rotation_matrix().into_inner()
    };
    Camera::new(
        target.width,
        target.height,
        target.fx,
        target.fy,
        target.cx,
        target.cy,
        rotation,
        center,
        target.near,
        target.far,
    )
}

/// Indices of the two cameras closest to `i` by center distance (ties by index).
pub fn nearest_two(cams: &[Camera], i: usize) -> (usize, usize) {
    let mut others: Vec<(f64, usize)> = cams
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, c)| ((c.center - cams[i].center).norm(), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    (others[0].1, others[1].1)
}

/// `views_per_pair` pseudo cameras on each arc between every camera and its
/// two nearest neighbors, at `t = k / (views_per_pair + 1)`.
pub fn pseudo_cameras_with_sources(
    cams: &[Camera],
    views_per_pair: usize,
) -> Result<Vec<PseudoCamera>> {
    if cams.len() < 3 {
        return Err(Error::TooFewCameras {
            needed: 3,
            got: cams.len(),
        });
    }
    let mut out = Vec::with_capacity(cams.len() * 2 * views_per_pair);
    for i in 0..cams.len() {
        let (n1, n2) = nearest_two(cams, i);
        for (nb, other) in [(n1, n2), (n2, n1)] {
            for k in 1..=views_per_pair {
                let t = k as f64 / (views_per_pair + 1) as f64;
                out.push(PseudoCamera {
                    camera: interpolate_camera(&cams[i], &cams[nb], &cams[other].center, t)?,
                    source: i,
                    neighbor: nb,
                    t,
                });
            }
        }
    }
    Ok(out)
}

pub fn pseudo_cameras(cams: &[Camera], views_per_pair: usize) -> Result<Vec<Camera>> {
    Ok(pseudo_cameras_with_sources(cams, views_per_pair)?
        .into_iter()
        .map(|p| p.camera)
        .collect())
}

/// Drops pseudo cameras whose center and rotation are within `tol` of an
/// earlier one.
pub fn dedup_pseudo_cameras(cams: Vec<PseudoCamera>, tol: f64) -> Vec<PseudoCamera> {
    let mut kept: Vec<PseudoCamera> = Vec::with_capacity(cams.len());
    for c in cams {
        let dup = kept.iter().any(|k| {
            (k.camera.center - c.camera.center).norm() <= tol
                && (k.camera.rotation - c.camera.rotation).abs().max() <= tol
        });
        if !dup {
            kept.push(c);
        }
    }
    kept
}

/// Similarity transform `x ↦ s R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Closed-form least-squares similarity mapping `src` onto `dst` (Umeyama).
pub fn align_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            left: src.len(),
            right: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::DegenerateTrajectory(format!(
            "need at least 3 positions, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let mean_s = src.iter().sum::<Vector3<f64>>() / n;
    let mean_d = dst.iter().sum::<Vector3<f64>>() / n;
    let var_s = src.iter().map(|p| (p - mean_s).norm_squared()).sum::<f64>() / n;
    let var_d = dst.iter().map(|p| (p - mean_d).norm_squared()).sum::<f64>() / n;
    if var_d <= 1e-24 {
        return Err(Error::DegenerateTrajectory(
            "ground-truth positions coincide".into(),
        ));
    }
    if var_s <= 1e-24 {
        return Err(Error::DegenerateTrajectory(
            "estimated positions coincide".into(),
        ));
    }
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mean_d) * (s - mean_s).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * sign).trace() / var_s;
    let translation = mean_d - rotation * mean_s * scale;
    Ok(Similarity {
        rotation,
        translation,
        scale,
    })
}

/// Absolute trajectory error after similarity alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ate {
    pub mean: f64,
    pub rmse: f64,
}

pub fn ate(traj_est: &[Vector3<f64>], traj_gt: &[Vector3<f64>]) -> Result<Ate> {
    let sim = align_similarity(traj_est, traj_gt)?;
    let n = traj_est.len() as f64;
    let residuals: Vec<f64> = traj_est
        .iter()
        .zip(traj_gt)
        .map(|(e, g)| (sim.apply(e) - g).norm())
        .collect();
    Ok(Ate {
        mean: residuals.iter().sum::<f64>() / n,
        rmse: (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt(),
    })
}
