//! Image and trajectory metrics, and the evaluation report.

use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry;
use crate::types::{check_dims, ImageBuffer};

pub use crate::ssim::ssim;

/// Peak signal-to-noise ratio in dB for peak value 1. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let n = 3 * a.values.len();
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = a
        .values
        .iter()
        .zip(&b.values)
        .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).powi(2)))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Serializes infinities as the strings `"inf"` / `"-inf"`.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!(
                    "invalid number {other:?}"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    #[serde(with = "extended_f64")]
    pub psnr_db: f64,
    pub ssim: f64,
    /// Reserved; always null.
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    #[serde(with = "extended_f64")]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub ate_mean: Option<f64>,
    pub ate_rmse: Option<f64>,
}

/// Order-independent mean: values are summed in sorted order.
fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trajectories to align for the ATE columns.
pub type Trajectories<'a> = (&'a [Vector3<f64>], &'a [Vector3<f64>]);

pub fn eval_report(
    names: &[String],
    renders: &[ImageBuffer],
    gts: &[ImageBuffer],
    trajectories: Option<Trajectories>,
) -> Result<EvalReport> {
    if renders.len() != gts.len() {
        return Err(Error::LengthMismatch {
            left: renders.len(),
            right: gts.len(),
        });
    }
    if names.len() != renders.len() {
        return Err(Error::LengthMismatch {
            left: names.len(),
            right: renders.len(),
        });
    }
    let mut views = Vec::with_capacity(renders.len());
    for ((name, r), g) in names.iter().zip(renders).zip(gts) {
        views.push(ViewMetrics {
            name: name.clone(),
            psnr_db: psnr(r, g)?,
            ssim: ssim(r, g)?,
            lpips: None,
        });
    }
    let (ate_mean, ate_rmse) = match trajectories {
        Some((est, gt)) => {
            let a = geometry::ate(est, gt)?;
            (Some(a.mean), Some(a.rmse))
        }
        None => (None, None),
    };
    Ok(EvalReport {
        mean_psnr_db: mean(views.iter().map(|v| v.psnr_db)),
        mean_ssim: mean(views.iter().map(|v| v.ssim)),
        views,
        ate_mean,
        ate_rmse,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<EvalReport> {
        serde_json::from_str(s).map_err(|e| Error::SchemaError(e.to_string()))
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self
            .views
            .iter()
            .map(|v| v.name.len())
            .chain(["mean".len(), "view".len()])
            .max()
            .unwrap_or(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>8}",
            "view", "PSNR (dB)", "SSIM"
        );
        for v in &self.views {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.4}  {:>8.5}",
                v.name, v.psnr_db, v.ssim
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.4}  {:>8.5}",
            "mean", self.mean_psnr_db, self.mean_ssim
        );
        if let (Some(m), Some(r)) = (self.ate_mean, self.ate_rmse) {
            let _ = writeln!(out, "ATE mean {m:.6}  rmse {r:.6}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::new(
            w,
            h,
            (0..w * h)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = ImageBuffer::filled(8, 8, [0.3; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = ImageBuffer::filled(8, 8, [0.4; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 9, 5);
        let y = random_image(&mut rng, 9, 5);
        let mut se = 0.0;
        for p in 0..45 {
            for c in 0..3 {
                se += (x.values[p][c] - y.values[p][c]).powi(2);
            }
        }
        let want = -10.0 * (se / 135.0).log10();
        assert!((psnr(&x, &y).unwrap() - want).abs() < 1e-9);
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    }

    #[test]
    fn ssim_agrees_with_photometric_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_image(&mut rng, 12, 12);
        let y = random_image(&mut rng, 12, 12);
        let l = crate::losses::photometric_loss(&x, &y, 1.0).unwrap();
        assert!((ssim(&x, &y).unwrap() - (1.0 - 2.0 * l)).abs() < 1e-12);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_report() {
        let a = ImageBuffer::filled(8, 8, [0.2, 0.5, 0.7]);
        let traj = vec![Vector3::zeros(), Vector3::x(), Vector3::y()];
        let r = eval_report(&["v0".into()], &[a.clone()], &[a], Some((&traj, &traj))).unwrap();
        assert_eq!(r.views[0].psnr_db, f64::INFINITY);
        assert!((r.mean_ssim - 1.0).abs() < 1e-12);
        assert!(r.ate_mean.unwrap() < 1e-12 && r.ate_rmse.unwrap() < 1e-12);
        let json = r.to_json();
        assert!(json.contains("\"inf\"") && json.contains("\"lpips\": null"));
        assert_eq!(EvalReport::from_json(&json).unwrap(), r);
    }

    #[test]
    fn report_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<ImageBuffer> = (0..5).map(|_| random_image(&mut rng, 10, 8)).collect();
        let g: Vec<ImageBuffer> = (0..5).map(|_| random_image(&mut rng, 10, 8)).collect();
        let names: Vec<String> = (0..5).map(|i| format!("v{i}")).collect();
        let a = eval_report(&names, &r, &g, None).unwrap();
        let order = [3, 0, 4, 1, 2];
        let pick = |v: &[ImageBuffer]| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let pn: Vec<String> = order.iter().map(|&i| names[i].clone()).collect();
        let b = eval_report(&pn, &pick(&r), &pick(&g), None).unwrap();
        assert_eq!(a.mean_psnr_db, b.mean_psnr_db);
        assert_eq!(a.mean_ssim, b.mean_ssim);
        assert!(a.ate_mean.is_none());
    }

    #[test]
    fn fixture_report_matches_hand_assembly() {
        let a = ImageBuffer::filled(4, 4, [0.5; 3]);
        let b = ImageBuffer::filled(4, 4, [0.6; 3]);
        let c = ImageBuffer::filled(4, 4, [0.3; 3]);
        let r = eval_report(
            &["x".into(), "y".into()],
            &[a.clone(), a.clone()],
            &[b.clone(), c.clone()],
            None,
        )
        .unwrap();
        let s1 = (2.0 * 0.5 * 0.6 + crate::ssim::C1) / (0.25 + 0.36 + crate::ssim::C1);
        let s2 = (2.0 * 0.5 * 0.3 + crate::ssim::C1) / (0.25 + 0.09 + crate::ssim::C1);
        let p1 = 20.0;
        let p2 = -10.0 * 0.04f64.log10();
        let want = EvalReport {
            views: vec![
                ViewMetrics {
                    name: "x".into(),
                    psnr_db: p1,
                    ssim: s1,
                    lpips: None,
                },
                ViewMetrics {
                    name: "y".into(),
                    psnr_db: p2,
                    ssim: s2,
                    lpips: None,
                },
            ],
            mean_psnr_db: (p1 + p2) / 2.0,
            mean_ssim: (s1 + s2) / 2.0,
            ate_mean: None,
            ate_rmse: None,
        };
        assert_eq!(r.views.len(), 2);
        for (x, y) in r.views.iter().zip(&want.views) {
            assert_eq!(x.name, y.name);
            assert!((x.psnr_db - y.psnr_db).abs() < 1e-9 && (x.ssim - y.ssim).abs() < 1e-12);
        }
        assert!((r.mean_psnr_db - want.mean_psnr_db).abs() < 1e-9);
        assert!((r.mean_ssim - want.mean_ssim).abs() < 1e-12);
        assert!(r.to_table().lines().count() == 4);
        assert!(matches!(
            eval_report(&["x".into()], &[a], &[], None),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
