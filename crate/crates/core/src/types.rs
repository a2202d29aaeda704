//! Domain types shared by the renderer, the losses and the optimizer.
//!
//! Everything is stored in `f64`; file codecs narrow to `f32` at the boundary.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sh;

/// Pinhole camera with OpenCV axes (x right, y down, z forward).
///
/// `rotation` maps camera-frame directions to world directions and `center`
/// is the camera position in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

/// Maximum orthonormality error of a camera rotation.
pub const ROTATION_TOL: f64 = 1e-9;

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            center,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upwards in the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        focal: f64,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Camera::new(
            width,
            height,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            eye,
            near,
            far,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera(format!(
                "image size {}x{} must be positive",
                self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidCamera(
                "focal lengths must be positive".into(),
            ));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidCamera(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("center is not finite".into()));
        }
        let err = rotation_error(&self.rotation);
        if err.is_nan() || err > ROTATION_TOL {
            return Err(Error::NonOrthonormalRotation(err));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// World point into the camera frame.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.center)
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.center
    }

    /// Continuous image coordinates of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame point at view-space depth `z` behind image coordinate (u, v).
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    pub fn orientation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }
}

/// `max(|RᵀR − I|, |det R − 1|)`.
pub fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

/// Sample position of pixel (x, y): its center.
#[inline]
pub fn pixel_center(x: usize, y: usize) -> (f64, f64) {
    (x as f64 + 0.5, y as f64 + 0.5)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a (not necessarily normalized) quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// One Gaussian, in the unconstrained parameterization used for storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: [f64; 3],
    /// `(w, x, y, z)`
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    /// `(L+1)²` coefficients per channel, coefficient-major: `sh[k * 3 + channel]`.
    pub sh: Vec<f64>,
}

/// Activated parameters of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Activated {
    pub mean: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub covariance: Matrix3<f64>,
}

/// Structure-of-arrays Gaussian scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    sh_degree: usize,
    pub means: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    /// Flattened `[gaussian][coefficient][channel]`.
    pub sh: Vec<f64>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Result<Self> {
        if sh_degree > sh::MAX_DEGREE {
            return Err(Error::ValueRange(format!(
                "sh degree {sh_degree} exceeds {}",
                sh::MAX_DEGREE
            )));
        }
        Ok(GaussianCloud {
            sh_degree,
            means: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
        })
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    /// Coefficients per channel.
    pub fn sh_coeffs(&self) -> usize {
        sh::coeff_count(self.sh_degree)
    }

    pub fn sh_stride(&self) -> usize {
        self.sh_coeffs() * 3
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) -> Result<()> {
        if g.sh.len() != self.sh_stride() {
            return Err(Error::LengthMismatch {
                left: g.sh.len(),
                right: self.sh_stride(),
            });
        }
        let n = norm4(&g.rotation);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::DegenerateInput("zero quaternion".into()));
        }
        self.means.push(g.mean);
        self.rotations.push(g.rotation.map(|c| c / n));
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        self.sh.extend_from_slice(&g.sh);
        Ok(())
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        Gaussian {
            mean: self.means[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            sh: self.sh_of(i).to_vec(),
        }
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scales[i].map(f64::exp)
    }

    /// Rotation, scale, opacity and covariance `Σ = R S Sᵀ Rᵀ` of Gaussian `i`.
    pub fn activate(&self, i: usize) -> Activated {
        let rotation = quat_to_matrix(&self.rotations[i]);
        let scale = Vector3::from(self.scale(i));
        let rs = rotation * Matrix3::from_diagonal(&scale);
        Activated {
            mean: Vector3::from(self.means[i]),
            rotation,
            scale,
            opacity: self.opacity(i),
            covariance: rs * rs.transpose(),
        }
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = norm4(q);
            if n > 0.0 && n.is_finite() {
                *q = q.map(|c| c / n);
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    /// Keeps the Gaussians whose flag is `true`.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let stride = self.sh_stride();
        let mut sh = Vec::with_capacity(self.sh.len());
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            sh.extend_from_slice(&self.sh[i * stride..(i + 1) * stride]);
        }
        self.sh = sh;
        retain_by(&mut self.means, keep);
        retain_by(&mut self.rotations, keep);
        retain_by(&mut self.log_scales, keep);
        retain_by(&mut self.opacity_logits, keep);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (name, len) in [
            ("rotations", self.rotations.len()),
            ("log_scales", self.log_scales.len()),
            ("opacity_logits", self.opacity_logits.len()),
            ("sh", self.sh.len() / self.sh_stride().max(1)),
        ] {
            if len != n {
                return Err(Error::SchemaError(format!(
                    "{name} has {len} entries, expected {n}"
                )));
            }
        }
        if self.sh.len() != n * self.sh_stride() {
            return Err(Error::LengthMismatch {
                left: self.sh.len(),
                right: n * self.sh_stride(),
            });
        }
        for q in &self.rotations {
            if (norm4(q) - 1.0).abs() > 1e-9 {
                return Err(Error::DegenerateInput(
                    "quaternion is not unit length".into(),
                ));
            }
        }
        Ok(())
    }
}

fn retain_by<T>(v: &mut Vec<T>, keep: &[bool]) {
    let mut it = keep.iter();
    v.retain(|_| *it.next().unwrap());
}

#[inline]
pub(crate) fn norm4(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

macro_rules! raster {
    ($(#[$meta:meta])* $name:ident, $elem:ty) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            pub width: usize,
            pub height: usize,
            pub values: Vec<$elem>,
        }

        impl $name {
            pub fn filled(width: usize, height: usize, value: $elem) -> Self {
                $name { width, height, values: vec![value; width * height] }
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize) -> $elem {
                self.values[y * self.width + x]
            }

            #[inline]
            pub fn set(&mut self, x: usize, y: usize, v: $elem) {
                self.values[y * self.width + x] = v;
            }
        }
    };
}

raster!(
    /// RGB image, nominally in `[0, 1]`.
    ImageBuffer,
    [f64; 3]
);
raster!(
    /// Camera-frame normals; zero where nothing covers the pixel.
    NormalMap,
    [f64; 3]
);
raster!(
    /// `true` = pixel participates in the loss.
    PixelMask,
    bool
);
raster!(
    /// Per-pixel confidence in `[0, 1]`.
    ConfidenceMap,
    f64
);

impl ImageBuffer {
    pub fn new(width: usize, height: usize, values: Vec<[f64; 3]>) -> Result<Self> {
        check_len(width, height, values.len())?;
        Ok(ImageBuffer {
            width,
            height,
            values,
        })
    }
}

impl NormalMap {
    pub fn new(width: usize, height: usize, values: Vec<[f64; 3]>) -> Result<Self> {
        check_len(width, height, values.len())?;
        Ok(NormalMap {
            width,
            height,
            values,
        })
    }
}

impl PixelMask {
    pub fn new(width: usize, height: usize, values: Vec<bool>) -> Result<Self> {
        check_len(width, height, values.len())?;
        Ok(PixelMask {
            width,
            height,
            values,
        })
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }
}

impl ConfidenceMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(width, height, values.len())?;
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ValueRange(format!("confidence {v} outside [0, 1]")));
        }
        Ok(ConfidenceMap {
            width,
            height,
            values,
        })
    }

    /// Maps arbitrary raw confidences into `[0, 1]`: non-finite and negative
    /// values become 0 and, if the maximum exceeds 1, everything is divided by it.
    pub fn normalized(width: usize, height: usize, raw: Vec<f64>) -> Result<Self> {
        check_len(width, height, raw.len())?;
        let mut values: Vec<f64> = raw
            .into_iter()
            .map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 })
            .collect();
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 1.0 {
            values.iter_mut().for_each(|v| *v = (*v / max).min(1.0));
        }
        Ok(ConfidenceMap {
            width,
            height,
            values,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSemantics {
    /// Composited plane distances.
    PlaneDistance,
    /// Composited view-space z of the Gaussian centers.
    AccumulatedZ,
    /// Externally estimated view-space z.
    Estimated,
}

/// Per-pixel depth; `NaN` marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub semantics: DepthSemantics,
}

impl DepthMap {
    pub fn new(
        width: usize,
        height: usize,
        values: Vec<f64>,
        semantics: DepthSemantics,
    ) -> Result<Self> {
        check_len(width, height, values.len())?;
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_nan() && !(**v >= 0.0 && v.is_finite()))
        {
            return Err(Error::ValueRange(format!(
                "depth {v} must be finite and >= 0 or NaN"
            )));
        }
        Ok(DepthMap {
            width,
            height,
            values,
            semantics,
        })
    }

    pub fn invalid(width: usize, height: usize, semantics: DepthSemantics) -> Self {
        DepthMap {
            width,
            height,
            values: vec![f64::NAN; width * height],
            semantics,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width * height != len {
        return Err(Error::LengthMismatch {
            left: len,
            right: width * height,
        });
    }
    Ok(())
}

pub(crate) fn check_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::dims(expected, actual));
    }
    Ok(())
}
