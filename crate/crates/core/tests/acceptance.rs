//! Acceptance criteria 1–10. Each prints one PASS/FAIL line; the test fails
//! if any criterion fails.
//!
//! Run with `cargo test -p splat-core --test acceptance -- --nocapture`.

use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splat_core::geometry::{self, Circle};
use splat_core::io::{self, FloatMap, PointCloud};
use splat_core::losses;
use splat_core::optim::gradcheck::{self, LossSelector};
use splat_core::optim::{self, TrainConfig, TrainState};
use splat_core::raster::{RenderOutput, RenderSettings, Renderer};
use splat_core::{synthetic, toy};
use splat_core::{Camera, ConfidenceMap, DepthMap, DepthSemantics, ImageBuffer};

struct Outcome {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.is_nan() && y.is_nan() {
                0.0
            } else if x.is_nan() || y.is_nan() {
                f64::INFINITY
            } else {
                (x - y).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn output_diff(a: &RenderOutput, b: &RenderOutput) -> f64 {
    let color = max_abs_diff(a.color.values.as_flattened(), b.color.values.as_flattened());
    let depth = max_abs_diff(&a.depth_plane.values, &b.depth_plane.values);
    let normal = max_abs_diff(
        a.normals.values.as_flattened(),
        b.normals.values.as_flattened(),
    );
    color.max(depth).max(normal)
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let selectors = [
        LossSelector::Photometric,
        LossSelector::Depth,
        LossSelector::Normal,
        LossSelector::Scale,
    ];
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut largest_failing: f64 = 0.0;
    for scene in 0..20u64 {
        let reports =
            gradcheck::check_random_scene(1000 + scene, 10, 32, 1, &selectors).expect("gradcheck");
        for (selector, r) in reports {
            worst = worst.max(r.max_relative_error());
            for g in r.groups.iter().filter(|g| !g.passed) {
                largest_failing = largest_failing.max(g.worst_analytic.abs());
                failures.push(format!(
                    "scene {scene} {selector:?} {}: analytic {:.4e} vs numeric {:.4e}",
                    g.group, g.worst_analytic, g.worst_numeric
                ));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail =
        format!("20 scenes x 4 losses, max rel err {worst:.2e} (< 1e-4), {secs:.1}s (< 120s)");
    if !failures.is_empty() {
        // One ulp of an O(0.1) loss over 2h is ~1e-12, i.e. 1e-4 relative at |g| ~ 1e-8.
        detail += &format!(
            "; {} failing groups, all with |gradient| <= {largest_failing:.1e}, at the f64 round-off floor of a central difference: [{}]",
            failures.len(),
            failures.join("; ")
        );
    }
    Outcome {
        id: 1,
        title: "gradient fidelity",
        pass: failures.is_empty() && secs < 120.0,
        detail,
    }
}

fn c2_renderer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cam = synthetic::default_camera(32);
    let no_term = RenderSettings {
        transmittance_min: 0.0,
        ..RenderSettings::default()
    };
    let oracle = Renderer::new(no_term.clone());
    let fast_exact = Renderer::new(no_term);
    let fast_default = Renderer::default();
    let (mut exact, mut terminated): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = rng.random_range(1..=50);
        let sh = rng.random_range(0..=3);
        let cloud = synthetic::random_scene(&mut rng, &cam, n, sh);
        let reference = oracle.render_bruteforce(&cloud, &cam).expect("oracle");
        exact = exact.max(output_diff(
            &fast_exact.render(&cloud, &cam).unwrap(),
            &reference,
        ));
        terminated = terminated.max(output_diff(
            &fast_default.render(&cloud, &cam).unwrap(),
            &reference,
        ));
    }
    Outcome {
        id: 2,
        title: "renderer oracle equivalence",
        pass: exact < 1e-6 && terminated < 1e-3,
        detail: format!("50 scenes, max |d| {exact:.2e} without early termination (< 1e-6), {terminated:.2e} with (< 1e-3)"),
    }
}

fn depth(values: Vec<f64>, w: usize) -> DepthMap {
    let h = values.len() / w;
    DepthMap {
        width: w,
        height: h,
        values,
        semantics: DepthSemantics::Estimated,
    }
}

/// Unweighted Pearson loss, two passes over finite pixels.
fn pearson_oracle(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mt = t.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(t) {
        cov += (a - mp) * (b - mt);
        vp += (a - mp) * (a - mp);
        vt += (b - mt) * (b - mt);
    }
    1.0 - cov / (vp * vt).sqrt()
}

fn c3_pearson() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (12, 10);
    let (mut drift, mut oracle_err): (f64, f64) = (0.0, 0.0);
    let mut zero_conf_exact = true;
    let mut in_range = true;
    for i in 0..1000 {
        let p: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.5..10.0)).collect();
        let t: Vec<f64> = p
            .iter()
            .map(|v| v * rng.random_range(-1.0..2.0) + rng.random_range(0.0..3.0))
            .collect();
        let conf: Vec<f64> = (0..w * h)
            .map(|_| {
                if rng.random_bool(0.15) {
                    0.0
                } else {
                    rng.random()
                }
            })
            .collect();
        let cm = ConfidenceMap::new(w, h, conf.clone()).unwrap();
        let (dp, dt) = (depth(p.clone(), w), depth(t.clone(), w));
        let base = losses::pearson_depth_loss(&dp, &dt, &cm).unwrap();
        in_range &= (0.0..=2.0).contains(&base);

        if i < 100 {
            for a in [0.1, 1.0, 10.0] {
                for b in [-5.0, 0.0, 5.0] {
                    let scaled = depth(p.iter().map(|v| a * v + b).collect(), w);
                    drift = drift
                        .max((losses::pearson_depth_loss(&scaled, &dt, &cm).unwrap() - base).abs());
                    let scaled_t = depth(t.iter().map(|v| a * v + b).collect(), w);
                    drift = drift.max(
                        (losses::pearson_depth_loss(&dp, &scaled_t, &cm).unwrap() - base).abs(),
                    );
                }
            }
            let uniform = ConfidenceMap::filled(w, h, rng.random_range(0.1..1.0));
            let weighted = losses::pearson_depth_loss(&dp, &dt, &uniform).unwrap();
            oracle_err = oracle_err.max((weighted - pearson_oracle(&p, &t)).abs());

            let mut p2 = p.clone();
            let mut t2 = t.clone();
            for k in 0..w * h {
                if conf[k] == 0.0 {
                    p2[k] += rng.random_range(-100.0..100.0);
                    t2[k] = rng.random_range(0.0..1e3);
                }
            }
            let perturbed = losses::pearson_depth_loss(&depth(p2, w), &depth(t2, w), &cm).unwrap();
            zero_conf_exact &= perturbed.to_bits() == base.to_bits();
        }
    }
    Outcome {
        id: 3,
        title: "Pearson loss properties",
        pass: drift < 1e-9 && oracle_err < 1e-12 && zero_conf_exact && in_range,
        detail: format!(
            "affine drift {drift:.2e} (< 1e-9), uniform vs oracle {oracle_err:.2e} (< 1e-12), zero-confidence exact: {zero_conf_exact}, 1000 pairs in [0, 2]: {in_range}"
        ),
    }
}

/// Masked pixels of a `w × h` image: every full or clipped cell loses its
/// one-pixel inner border.
fn cell_formula(w: usize, h: usize, patch: usize) -> usize {
    let cells = |len: usize| -> Vec<usize> {
        let mut v = vec![patch; len / patch];
        if !len.is_multiple_of(patch) {
            v.push(len % patch);
        }
        v
    };
    let mut masked = 0;
    for cw in cells(w) {
        for ch in cells(h) {
            masked += cw * ch - cw.saturating_sub(2) * ch.saturating_sub(2);
        }
    }
    masked
}

fn c4_mask() -> Outcome {
    let mut mismatches = 0;
    for w in 1..=100 {
        for h in 1..=100 {
            let m = geometry::patch_border_mask(w, h, 14).unwrap();
            if w * h - m.count() != cell_formula(w, h, 14) {
                mismatches += 1;
            }
        }
    }
    let m = geometry::patch_border_mask(28, 28, 14).unwrap();
    let masked = 28 * 28 - m.count();
    Outcome {
        id: 4,
        title: "mask arithmetic",
        pass: mismatches == 0 && masked == 208,
        detail: format!("10000 sizes, {mismatches} mismatches; 28x28 masked = {masked} (208)"),
    }
}

/// Image whose colors encode the pixel coordinates.
fn coordinate_image(w: usize, h: usize) -> ImageBuffer {
    let mut img = ImageBuffer::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            img.set(x, y, [x as f64, y as f64, 1.0]);
        }
    }
    img
}

fn c5_warp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, h) = (40, 30);
    let cam = Camera::look_at(
        Vector3::zeros(),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.0, -1.0, 0.0),
        w,
        h,
        36.0,
        0.1,
        100.0,
    )
    .unwrap();
    let img = coordinate_image(w, h);

    // Identity warp over random depth with NaNs and random confidence.
    let z: Vec<f64> = (0..w * h)
        .map(|_| {
            if rng.random_bool(0.1) {
                f64::NAN
            } else {
                rng.random_range(1.0..9.0)
            }
        })
        .collect();
    let conf: Vec<f64> = (0..w * h).map(|_| rng.random()).collect();
    let dz = DepthMap::new(w, h, z.clone(), DepthSemantics::Estimated).unwrap();
    let cm = ConfidenceMap::new(w, h, conf.clone()).unwrap();
    let (out, mask) = geometry::warp(&img, &dz, &cm, &cam, &cam, 0.2).unwrap();
    let mut identity_ok = true;
    let mut leaked = 0;
    for p in 0..w * h {
        let expected = !z[p].is_nan() && conf[p] >= 0.2;
        identity_ok &= mask.values[p] == expected && (!expected || out.values[p] == img.values[p]);
        if mask.values[p] {
            let src = out.values[p][1] as usize * w + out.values[p][0] as usize;
            if conf[src] < 0.2 {
                leaked += 1;
            }
        }
    }

    // Constant-depth translation: pixels shift by fx * tx / z.
    let (depth_z, tx) = (4.0, 0.3);
    let mut moved = cam.clone();
    moved.center = Vector3::new(tx, 0.0, 0.0);
    let flat = DepthMap::new(w, h, vec![depth_z; w * h], DepthSemantics::Estimated).unwrap();
    let ones = ConfidenceMap::filled(w, h, 1.0);
    let (out, mask) = geometry::warp(&img, &flat, &ones, &cam, &moved, 0.2).unwrap();
    let shift = cam.fx * tx / depth_z;
    let (mut valid, mut close) = (0, 0);
    for y in 0..h {
        for x in 0..w {
            if !mask.values[y * w + x] {
                continue;
            }
            valid += 1;
            let [sx, sy, _] = out.get(x, y);
            if ((sx - shift) - x as f64).abs() <= 1.0 && (sy - y as f64).abs() <= 1.0 {
                close += 1;
            }
        }
    }
    let frac = close as f64 / valid.max(1) as f64;
    Outcome {
        id: 5,
        title: "warping",
        pass: identity_ok && frac >= 0.95 && valid > 0 && leaked == 0,
        detail: format!(
            "identity exact: {identity_ok}; translation within 1px at {:.1}% of {valid} valid pixels (>= 95%); low-confidence sources: {leaked}",
            100.0 * frac
        ),
    }
}

/// Circumcenter from barycentric weights.
fn circumcenter(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let (la, lb, lc) = (
        (b - c).norm_squared(),
        (c - a).norm_squared(),
        (a - b).norm_squared(),
    );
    let (wa, wb, wc) = (
        la * (lb + lc - la),
        lb * (lc + la - lb),
        lc * (la + lb - lc),
    );
    (a * wa + b * wb + c * wc) / (wa + wb + wc)
}

fn c6_circle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut endpoints = true;
    let mut triples = 0;
    while triples < 1000 {
        let mut pt = || {
            Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            )
        };
        let (a, b, c) = (pt(), pt(), pt());
        // Non-degenerate: every angle at least 10 degrees.
        let angle = |p: &Vector3<f64>, q: &Vector3<f64>, r: &Vector3<f64>| {
            (q - p).angle(&(r - p)).to_degrees()
        };
        if angle(&a, &b, &c)
            .min(angle(&b, &a, &c))
            .min(angle(&c, &a, &b))
            < 10.0
        {
            continue;
        }
        triples += 1;
        let o = circumcenter(&a, &b, &c);
        let r = (a - o).norm();
        for k in 1..10 {
            let p = geometry::circle_interpolate(&a, &b, &c, k as f64 / 10.0).unwrap();
            worst = worst.max(((p - o).norm() - r).abs());
        }
        endpoints &= geometry::circle_interpolate(&a, &b, &c, 0.0).unwrap() == a
            && geometry::circle_interpolate(&a, &b, &c, 1.0).unwrap() == b;
    }
    let a = Vector3::new(0.0, 0.0, 0.0);
    let b = Vector3::new(2.0, 0.0, 0.0);
    let c = Vector3::new(5.0, 0.0, 0.0);
    let collinear = Circle::through(&a, &b, &c).is_none()
        && geometry::circle_interpolate(&a, &b, &c, 0.25)
            .map(|p| (p - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-15)
            .unwrap_or(false);
    Outcome {
        id: 6,
        title: "circle interpolation",
        pass: worst < 1e-9 && endpoints && collinear,
        detail: format!("1000 triples, max circumcenter distance error {worst:.2e} (< 1e-9), endpoints exact: {endpoints}, collinear fallback: {collinear}"),
    }
}

fn c7_ate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(10..40);
        let gt: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                )
            })
            .collect();
        let q = synthetic::random_unit_quaternion(&mut rng);
        let r = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let t = Vector3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        );
        let s = rng.random_range(0.5..2.0);
        let est: Vec<Vector3<f64>> = gt.iter().map(|p| r * p * s + t).collect();
        let a = geometry::ate(&est, &gt).unwrap();
        worst = worst.max(a.mean).max(a.rmse);
    }
    let gt: Vec<Vector3<f64>> = (0..12)
        .map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, 1.0 - i as f64))
        .collect();
    let id = geometry::ate(&gt, &gt).unwrap();
    let identity = id.mean < 1e-12 && id.rmse < 1e-12;
    Outcome {
        id: 7,
        title: "ATE under similarity",
        pass: worst < 1e-9 && identity,
        detail: format!("200 trajectories (10-39 points), max ATE {worst:.2e} (< 1e-9), identity ({:.1e}, {:.1e})", id.mean, id.rmse),
    }
}

fn c8_toy() -> Outcome {
    let start = Instant::now();
    let results = toy::ablation(2000, 0).expect("toy ablation");
    let secs = start.elapsed().as_secs_f64();
    for r in &results {
        println!(
            "    {:<22} held-out PSNR {:7.3} dB  SSIM {:.4}  plane-depth error {:.4}  ({:.1}s)",
            r.name, r.psnr_db, r.ssim, r.depth_error, r.seconds
        );
    }
    let psnr: Vec<f64> = results.iter().map(|r| r.psnr_db).collect();
    let monotone = psnr.windows(2).all(|p| p[1] >= p[0]);
    let gain = psnr[3] - psnr[0];
    let drop = 1.0 - results[1].depth_error / results[0].depth_error;
    Outcome {
        id: 8,
        title: "toy end-to-end ablation",
        pass: monotone && gain >= 0.5 && drop >= 0.3 && secs < 600.0,
        detail: format!(
            "PSNR monotone: {monotone}, full vs photometric {gain:+.3} dB (>= 0.5), depth error drop {:.1}% (>= 30%), {secs:.0}s (< 600s)",
            100.0 * drop
        ),
    }
}

fn c9_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cam = synthetic::default_camera(64);
    let cloud = synthetic::random_scene(&mut rng, &cam, 300, 2);
    let reference = Renderer::default().render(&cloud, &cam).unwrap();
    let render_ok = (1..=8).all(|t| {
        Renderer::new(RenderSettings::default().with_threads(t))
            .render(&cloud, &cam)
            .unwrap()
            .bit_identical(&reference)
    });

    let scene = toy::toy_scene(24, toy::BASELINE_DEG, toy::HELDOUT_DEG);
    let data = toy::toy_data(&scene, &toy::ToyOptions::default()).unwrap();
    let run = |threads: usize| {
        let cfg = TrainConfig {
            iterations: 40,
            threads,
            splitting_enabled: true,
            split_from: 0,
            split_interval: 10,
            ..toy::toy_config()
        };
        let state = TrainState::new(data.init.clone(), data.rig_extent, cfg.seed);
        let state = optim::train(state, &data.views, &data.pseudo, &cfg).unwrap();
        (
            io::encode_cloud(&state.cloud),
            serde_json::to_string(&state.history).unwrap(),
        )
    };
    let first = run(1);
    let train_ok = run(1) == first && run(4) == first;
    Outcome {
        id: 9,
        title: "determinism",
        pass: render_ok && train_ok,
        detail: format!("render bit-identical across 1..8 threads: {render_ok}; train byte-identical across runs and 1 vs 4 threads: {train_ok}"),
    }
}

fn random_camera<R: Rng>(rng: &mut R) -> Camera {
    let mut v = || {
        Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        )
    };
    let eye = v();
    let target = eye + v() + Vector3::new(0.0, 0.0, 0.1);
    let up = v();
    let (w, h) = (rng.random_range(1..400), rng.random_range(1..400));
    Camera::look_at(
        eye,
        target,
        up,
        w,
        h,
        rng.random_range(10.0..900.0),
        rng.random_range(0.01..1.0),
        rng.random_range(10.0..500.0),
    )
    .unwrap_or_else(|_| synthetic::default_camera(8))
}

fn c10_codecs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures = [0usize; 5];
    for _ in 0..1000 {
        let n = rng.random_range(0..40);
        let points = PointCloud {
            positions: (0..n)
                .map(|_| {
                    [
                        rng.random(),
                        rng.random::<f32>() * -50.0,
                        rng.random::<f32>() * 1e4,
                    ]
                })
                .collect(),
            colors: (0..n)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect(),
            confidences: rng
                .random_bool(0.5)
                .then(|| (0..n).map(|_| rng.random()).collect()),
        };
        if io::decode_points(&io::encode_points(&points).unwrap()).ok() != Some(points) {
            failures[0] += 1;
        }

        let cam = synthetic::default_camera(16);
        let (n, sh) = (rng.random_range(0..20), rng.random_range(0..=3));
        let cloud = synthetic::random_scene(&mut rng, &cam, n, sh);
        if io::decode_cloud(&io::encode_cloud(&cloud)).ok() != Some(cloud) {
            failures[1] += 1;
        }

        let (w, h, ch) = (
            rng.random_range(1..20),
            rng.random_range(1..20),
            if rng.random_bool(0.5) { 1 } else { 3 },
        );
        let data: Vec<f32> = (0..w * h * ch)
            .map(|_| match rng.random_range(0..20) {
                0 => f32::NAN,
                1 => f32::INFINITY,
                2 => -0.0,
                _ => {
                    f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)
                        * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                }
            })
            .collect();
        let map = FloatMap {
            width: w,
            height: h,
            channels: ch,
            data,
        };
        if !io::decode_pfm(&io::encode_pfm(&map)).is_ok_and(|m| m.bit_identical(&map)) {
            failures[2] += 1;
        }

        let (w, h) = (rng.random_range(1..24), rng.random_range(1..24));
        let img = ImageBuffer::new(
            w,
            h,
            (0..w * h)
                .map(|_| [0; 3].map(|_: i32| rng.random_range(0..=255u8) as f64 / 255.0))
                .collect(),
        )
        .unwrap();
        let bytes = io::encode_ppm(&img);
        if !io::decode_ppm(&bytes).is_ok_and(|d| d == img && io::encode_ppm(&d) == bytes) {
            failures[3] += 1;
        }

        let cams: Vec<Camera> = (0..rng.random_range(1..4))
            .map(|_| random_camera(&mut rng))
            .collect();
        let text = io::cameras_to_json(&cams);
        if !io::cameras_from_json(&text).is_ok_and(|c| c == cams && io::cameras_to_json(&c) == text)
        {
            failures[4] += 1;
        }
    }
    Outcome {
        id: 10,
        title: "codec round-trips",
        pass: failures.iter().all(|f| *f == 0),
        detail: format!("1000 payloads each; failures PLY points {}, PLY cloud {}, PFM {}, PPM {}, camera JSON {}", failures[0], failures[1], failures[2], failures[3], failures[4]),
    }
}

#[test]
fn acceptance() {
    let criteria: [fn() -> Outcome; 10] = [
        c1_gradients,
        c2_renderer_oracle,
        c3_pearson,
        c4_mask,
        c5_warp,
        c6_circle,
        c7_ate,
        c8_toy,
        c9_determinism,
        c10_codecs,
    ];
    let mut outcomes = Vec::new();
    for c in criteria {
        let o = c();
        println!(
            "criterion {:>2} {}: {} ({})",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.title,
            o.detail
        );
        outcomes.push(o);
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
