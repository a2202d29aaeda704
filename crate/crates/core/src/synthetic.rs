//! Deterministic synthetic scenes for tests, gradient checks and the toy
//! reconstruction benchmark.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::sh;
use crate::types::{Camera, Gaussian, GaussianCloud};

/// 32×32 camera at the origin looking down +z.
pub fn default_camera(size: usize) -> Camera {
    Camera::look_at(
        Vector3::zeros(),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, -1.0, 0.0),
        size,
        size,
        size as f64,
        0.1,
        100.0,
    )
    .expect("valid camera")
}

pub fn random_unit_quaternion<R: Rng>(rng: &mut R) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = crate::types::norm4(&q);
        if n > 1e-3 {
            return q.map(|c| c / n);
        }
    }
}

/// Random Gaussians whose centers project inside the image of `cam`, at view
/// depth in `[3, 7]`.
pub fn random_scene<R: Rng>(
    rng: &mut R,
    cam: &Camera,
    count: usize,
    sh_degree: usize,
) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(sh_degree).expect("valid degree");
    let coeffs = sh::coeff_count(sh_degree);
    let margin = 0.15;
    for _ in 0..count {
        let z = rng.random_range(3.0..7.0);
        let u = rng.random_range(margin..1.0 - margin) * cam.width as f64;
        let v = rng.random_range(margin..1.0 - margin) * cam.height as f64;
        let mean = cam.camera_to_world(&cam.unproject(u, v, z));
        let mut log_scale = [0.0; 3];
        for s in &mut log_scale {
            *s = rng.random_range(0.06f64..0.35).ln();
        }
        let mut coeff = vec![0.0; coeffs * 3];
        for ch in 0..3 {
            coeff[ch] = sh::rgb_to_dc(rng.random_range(0.05..0.95));
        }
        for c in coeff.iter_mut().skip(3) {
            *c = rng.random_range(-0.2..0.2);
        }
        cloud
            .push(Gaussian {
                mean: [mean.x, mean.y, mean.z],
                rotation: random_unit_quaternion(rng),
                log_scale,
                opacity_logit: rng.random_range(-1.5..2.0),
                sh: coeff,
            })
            .expect("consistent gaussian");
    }
    cloud
}

/// A flat, textured rectangle of Gaussians.
#[derive(Debug, Clone)]
pub struct TexturedPlane {
    pub origin: Vector3<f64>,
    /// In-plane axes; the rectangle spans `origin + a·axis_u + b·axis_v` for
    /// `a, b ∈ [0, 1]`.
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub samples_u: usize,
    pub samples_v: usize,
    /// Texture: (a, b) in the unit square to RGB.
    pub texture: fn(f64, f64) -> [f64; 3],
}

impl TexturedPlane {
    pub fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v).normalize()
    }

    /// Appends one thin Gaussian per texture sample.
    pub fn append_to(&self, cloud: &mut GaussianCloud, opacity: f64) -> Result<()> {
        let du = self.axis_u / self.samples_u as f64;
        let dv = self.axis_v / self.samples_v as f64;
        let frame = nalgebra::Matrix3::from_columns(&[
            self.axis_u.normalize(),
            self.normal().cross(&self.axis_u.normalize()),
            self.normal(),
        ]);
        let q = nalgebra::UnitQuaternion::from_matrix(&frame);
        let rotation = [q.w, q.i, q.j, q.k];
        let spacing_u = du.norm();
        let spacing_v = dv.norm();
        let coeffs = cloud.sh_coeffs();
        for j in 0..self.samples_v {
            for i in 0..self.samples_u {
                let a = (i as f64 + 0.5) / self.samples_u as f64;
                let b = (j as f64 + 0.5) / self.samples_v as f64;
                let p = self.origin + self.axis_u * a + self.axis_v * b;
                let rgb = (self.texture)(a, b);
                let mut coeff = vec![0.0; coeffs * 3];
                for ch in 0..3 {
                    coeff[ch] = sh::rgb_to_dc(rgb[ch]);
                }
                cloud.push(Gaussian {
                    mean: [p.x, p.y, p.z],
                    rotation,
                    log_scale: [
                        (0.6 * spacing_u).ln(),
                        (0.6 * spacing_v).ln(),
                        (0.02 * spacing_u.min(spacing_v)).ln(),
                    ],
                    opacity_logit: crate::types::logit(opacity),
                    sh: coeff,
                })?;
            }
        }
        Ok(())
    }
}

pub fn checker_texture(a: f64, b: f64) -> [f64; 3] {
    let cell = ((a * 6.0).floor() as i64 + (b * 6.0).floor() as i64) & 1;
    let base = if cell == 0 { 0.85 } else { 0.25 };
    [base, 0.35 + 0.5 * a, 0.3 + 0.4 * b]
}

pub fn stripe_texture(a: f64, b: f64) -> [f64; 3] {
    let s = 0.5 + 0.4 * (a * 18.0).sin() * (b * 5.0).cos();
    [0.9 - 0.5 * b, s, 0.2 + 0.6 * (1.0 - s)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn random_scene_is_visible() {
        let cam = default_camera(32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let cloud = random_scene(&mut rng, &cam, 10, 1);
        assert_eq!(cloud.len(), 10);
        cloud.validate().unwrap();
        for m in &cloud.means {
            let p = cam.world_to_camera(&Vector3::from(*m));
            let (u, v) = cam.project(&p);
            assert!(p.z > 3.0 && (0.0..32.0).contains(&u) && (0.0..32.0).contains(&v));
        }
    }

    #[test]
    fn plane_gaussians_have_plane_normal_as_smallest_axis() {
        let plane = TexturedPlane {
            origin: Vector3::new(-1.0, -1.0, 5.0),
            axis_u: Vector3::new(2.0, 0.0, 0.0),
            axis_v: Vector3::new(0.0, 2.0, 0.0),
            samples_u: 4,
            samples_v: 4,
            texture: checker_texture,
        };
        let mut cloud = GaussianCloud::new(0).unwrap();
        plane.append_to(&mut cloud, 0.9).unwrap();
        assert_eq!(cloud.len(), 16);
        let a = cloud.activate(0);
        let n = a.rotation.column(2);
        assert!((n.dot(&plane.normal()).abs() - 1.0).abs() < 1e-12);
    }
}
