use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::synthetic::{default_camera, random_scene};
use crate::types::{logit, Gaussian};

fn camera(size: usize, f: f64, c: f64) -> Camera {
    Camera::new(
        size,
        size,
        f,
        f,
        c,
        c,
        Matrix3::identity(),
        Vector3::zeros(),
        0.1,
        100.0,
    )
    .unwrap()
}

fn flat_gaussian(mean: [f64; 3], log_scale: [f64; 3], opacity: f64, rgb: [f64; 3]) -> Gaussian {
    Gaussian {
        mean,
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale,
        opacity_logit: logit(opacity),
        sh: rgb.iter().map(|c| sh::rgb_to_dc(*c)).collect(),
    }
}

fn cloud_of(gs: Vec<Gaussian>) -> GaussianCloud {
    let mut c = GaussianCloud::new(0).unwrap();
    for g in gs {
        c.push(g).unwrap();
    }
    c
}

#[test]
fn on_axis_projection() {
    let cam = camera(100, 100.0, 50.0);
    let cloud = cloud_of(vec![flat_gaussian(
        [0.0, 0.0, 5.0],
        [0.0; 3],
        0.5,
        [0.5; 3],
    )]);
    let p = project(&cloud, &cam).unwrap();
    assert_eq!(p.len(), 1);
    assert_eq!(p[0].mean, [50.0, 50.0]);
    assert_eq!(p[0].depth, 5.0);
}

#[test]
fn projected_covariance_matches_hand_product() {
    let cam = camera(100, 100.0, 50.0);
    let cloud = cloud_of(vec![flat_gaussian(
        [0.0, 0.0, 5.0],
        [0.0; 3],
        0.5,
        [0.5; 3],
    )]);
    let p = project(&cloud, &cam).unwrap();
    // J W Σ Wᵀ Jᵀ with W = I, Σ = I, J = [[f/z, 0, -f x/z²], [0, f/z, -f y/z²]]
    let j = [[100.0 / 5.0, 0.0, 0.0], [0.0, 100.0 / 5.0, 0.0]];
    let mut expect = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            for k in 0..3 {
                expect[r][c] += j[r][k] * j[c][k];
            }
        }
    }
    assert_eq!(expect, [[400.0, 0.0], [0.0, 400.0]]);
    for r in 0..2 {
        for c in 0..2 {
            assert!((p[0].cov[r][c] - expect[r][c]).abs() < 1e-9);
        }
    }
}

#[test]
fn gaussian_at_near_plane_is_culled() {
    let cam = camera(32, 32.0, 16.0);
    let cloud = cloud_of(vec![
        flat_gaussian([0.0, 0.0, 0.1], [0.0; 3], 0.5, [0.5; 3]),
        flat_gaussian([0.0, 0.0, -3.0], [0.0; 3], 0.5, [0.5; 3]),
    ]);
    assert!(project(&cloud, &cam).unwrap().is_empty());
}

#[test]
fn empty_cloud_renders_background() {
    let cam = camera(8, 8.0, 4.0);
    let bg = [0.2, 0.4, 0.6];
    let r = Renderer::new(RenderSettings {
        background: bg,
        ..Default::default()
    });
    let cloud = GaussianCloud::new(0).unwrap();
    let out = r.render(&cloud, &cam).unwrap();
    assert!(out.color.values.iter().all(|c| *c == bg));
    assert!(out.alpha.iter().all(|a| *a == 0.0));
    assert!(out.depth_plane.values.iter().all(|d| d.is_nan()));
    assert!(out.depth_accum.values.iter().all(|d| d.is_nan()));
    assert!(out.bit_identical(&r.render_bruteforce(&cloud, &cam).unwrap()));
}

#[test]
fn single_saturated_plane_depth() {
    // Pixel (16, 16) samples at (16.5, 16.5) = principal point.
    let cam = camera(33, 40.0, 16.5);
    let cloud = cloud_of(vec![flat_gaussian(
        [0.0, 0.0, 5.0],
        [0.0, 0.0, -6.0],
        0.999,
        [1.0; 3],
    )]);
    let out = render(&cloud, &cam).unwrap();
    let p = 16 * 33 + 16;
    assert!((out.depth_plane.values[p] / out.alpha[p] - 5.0).abs() < 1e-6);
    assert_eq!(out.alpha[p], 0.99);
    let n = out.normals.values[p];
    assert!((n[2] + 0.99).abs() < 1e-12);
}

#[test]
fn two_half_transparent_layers() {
    let cam = camera(33, 40.0, 16.5);
    let bg = [0.0, 1.0, 0.0];
    let cloud = cloud_of(vec![
        flat_gaussian([0.0, 0.0, 5.0], [0.0, 0.0, -6.0], 0.5, [0.0, 0.0, 1.0]),
        flat_gaussian([0.0, 0.0, 4.0], [0.0, 0.0, -6.0], 0.5, [1.0, 0.0, 0.0]),
    ]);
    let r = Renderer::new(RenderSettings {
        background: bg,
        ..Default::default()
    });
    let out = r.render(&cloud, &cam).unwrap();
    let c = out.color.values[16 * 33 + 16];
    let want = [0.5, 0.25, 0.25];
    for k in 0..3 {
        assert!((c[k] - want[k]).abs() < 1e-12, "{c:?}");
    }
    let list = out.contributors.pixel(16 * 33 + 16);
    assert_eq!(list.len(), 2);
    assert_eq!(list[0].index, 1);
    assert_eq!(list[1].transmittance, 0.5);
}

#[test]
fn depth_ties_break_by_index() {
    let cam = camera(9, 10.0, 4.5);
    let cloud = cloud_of(vec![
        flat_gaussian([0.0, 0.0, 5.0], [0.0; 3], 0.5, [1.0, 0.0, 0.0]),
        flat_gaussian([0.0, 0.0, 5.0], [0.0; 3], 0.5, [0.0, 0.0, 1.0]),
    ]);
    let out = render(&cloud, &cam).unwrap();
    let list = out.contributors.pixel(4 * 9 + 4);
    assert_eq!(list.iter().map(|c| c.index).collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn compositing_invariants_on_random_scenes() {
    let cam = default_camera(32);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let cloud = random_scene(&mut rng, &cam, 30, 0);
        let out = render(&cloud, &cam).unwrap();
        for p in 0..cam.pixel_count() {
            let list = out.contributors.pixel(p);
            let mut t = 1.0;
            for c in list {
                assert_eq!(c.transmittance, t);
                t *= 1.0 - c.alpha;
            }
            assert!((out.alpha[p] + t - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&out.alpha[p]));
            let n = out.normals.values[p];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!(norm <= out.alpha[p] + 1e-9);
            if list.len() == 1 {
                let g = &project(&cloud, &cam).unwrap();
                let gp = g
                    .iter()
                    .find(|g| g.index == list[0].index as usize)
                    .unwrap();
                assert_eq!(out.depth_plane.values[p], gp.plane_distance * list[0].alpha);
            }
        }
    }
}

#[test]
fn matches_bruteforce_without_early_termination() {
    let cam = default_camera(32);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let settings = RenderSettings {
        transmittance_min: 0.0,
        ..Default::default()
    };
    let r = Renderer::new(settings);
    for _ in 0..5 {
        let n = rng.random_range(1..50);
        let cloud = random_scene(&mut rng, &cam, n, 0);
        let a = r.render(&cloud, &cam).unwrap();
        let b = r.render_bruteforce(&cloud, &cam).unwrap();
        for p in 0..cam.pixel_count() {
            for c in 0..3 {
                assert!((a.color.values[p][c] - b.color.values[p][c]).abs() < 1e-6);
                assert!((a.normals.values[p][c] - b.normals.values[p][c]).abs() < 1e-6);
            }
            let (da, db) = (a.depth_plane.values[p], b.depth_plane.values[p]);
            assert!(da.is_nan() && db.is_nan() || (da - db).abs() < 1e-6);
        }
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let cam = default_camera(32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_scene(&mut rng, &cam, 40, 1);
    let single = Renderer::new(RenderSettings::default())
        .render(&cloud, &cam)
        .unwrap();
    let multi = Renderer::new(RenderSettings::default().with_threads(4))
        .render(&cloud, &cam)
        .unwrap();
    assert!(single.bit_identical(&multi));
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let cam = default_camera(32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = random_scene(&mut rng, &cam, 10, 0);
    let r = Renderer::default();
    let out = r.render(&cloud, &cam).unwrap();
    let g = r
        .render_backward(&cloud, &cam, &out, &PixelGrads::zeros(32, 32))
        .unwrap();
    assert_eq!(g, CloudGrads::zeros(&cloud));
}

#[test]
fn color_gradient_is_blend_weight() {
    let cam = camera(17, 20.0, 8.5);
    let cloud = cloud_of(vec![flat_gaussian(
        [0.1, -0.2, 5.0],
        [-1.0, -1.2, -1.1],
        0.7,
        [0.3; 3],
    )]);
    let r = Renderer::default();
    let out = r.render(&cloud, &cam).unwrap();
    let p = 8 * 17 + 8;
    let mut g = PixelGrads::zeros(17, 17);
    g.color[p] = [1.0, 0.0, 0.0];
    let grads = r.render_backward(&cloud, &cam, &out, &g).unwrap();
    let c = out.contributors.pixel(p)[0];
    // dC/dc = α T, and the DC coefficient enters with the constant C0.
    assert!((grads.sh[0] - c.alpha * c.transmittance * sh::C0).abs() < 1e-15);
    assert_eq!(grads.sh[1], 0.0);
}

#[test]
fn backward_is_thread_invariant() {
    let cam = default_camera(32);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = random_scene(&mut rng, &cam, 20, 1);
    let mut g = PixelGrads::zeros(32, 32);
    for p in 0..cam.pixel_count() {
        g.color[p] = [rng.random(), rng.random(), rng.random()];
        g.depth_plane[p] = rng.random();
    }
    let a = Renderer::default();
    let b = Renderer::new(RenderSettings::default().with_threads(3));
    let out = a.render(&cloud, &cam).unwrap();
    assert_eq!(
        a.render_backward(&cloud, &cam, &out, &g).unwrap(),
        b.render_backward(&cloud, &cam, &out, &g).unwrap()
    );
}

/// Weighted sum of every rendered channel, used as a scalar probe.
fn probe(out: &RenderOutput, g: &PixelGrads) -> f64 {
    let mut s = 0.0;
    for p in 0..g.color.len() {
        for c in 0..3 {
            s +=
                g.color[p][c] * out.color.values[p][c] + g.normals[p][c] * out.normals.values[p][c];
        }
        let dp = out.depth_plane.values[p];
        let da = out.depth_accum.values[p];
        if !dp.is_nan() {
            s += g.depth_plane[p] * dp + g.depth_accum[p] * da;
        }
        s += g.alpha[p] * out.alpha[p];
    }
    s
}

#[test]
fn gradient_matches_finite_differences() {
    let cam = default_camera(24);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let r = Renderer::new(RenderSettings {
        background: [0.1, 0.2, 0.3],
        ..RenderSettings::smooth()
    });
    let cloud = random_scene(&mut rng, &cam, 4, 1);
    let mut g = PixelGrads::zeros(24, 24);
    for p in 0..cam.pixel_count() {
        g.color[p] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        g.normals[p] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        g.depth_plane[p] = rng.random_range(-1.0..1.0);
        g.depth_accum[p] = rng.random_range(-1.0..1.0);
        g.alpha[p] = rng.random_range(-1.0..1.0);
    }
    let out = r.render(&cloud, &cam).unwrap();
    let analytic = r.render_backward(&cloud, &cam, &out, &g).unwrap();
    let h = 1e-5;
    let eval = |c: &GaussianCloud| probe(&r.render(c, &cam).unwrap(), &g);
    let check = |a: f64, f: f64, what: &str| {
        let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
        assert!(rel < 1e-4, "{what}: analytic {a} fd {f}");
    };
    for i in 0..cloud.len() {
        for k in 0..3 {
            let mut p = cloud.clone();
            p.means[i][k] += h;
            let mut m = cloud.clone();
            m.means[i][k] -= h;
            check(
                analytic.means[i][k],
                (eval(&p) - eval(&m)) / (2.0 * h),
                "mean",
            );
            let mut p = cloud.clone();
            p.log_scales[i][k] += h;
            let mut m = cloud.clone();
            m.log_scales[i][k] -= h;
            check(
                analytic.log_scales[i][k],
                (eval(&p) - eval(&m)) / (2.0 * h),
                "scale",
            );
        }
        for k in 0..4 {
            let mut p = cloud.clone();
            p.rotations[i][k] += h;
            let mut m = cloud.clone();
            m.rotations[i][k] -= h;
            check(
                analytic.rotations[i][k],
                (eval(&p) - eval(&m)) / (2.0 * h),
                "rotation",
            );
        }
        let mut p = cloud.clone();
        p.opacity_logits[i] += h;
        let mut m = cloud.clone();
        m.opacity_logits[i] -= h;
        check(
            analytic.opacity_logits[i],
            (eval(&p) - eval(&m)) / (2.0 * h),
            "opacity",
        );
        for k in 0..cloud.sh_stride() {
            let j = i * cloud.sh_stride() + k;
            let mut p = cloud.clone();
            p.sh[j] += h;
            let mut m = cloud.clone();
            m.sh[j] -= h;
            check(analytic.sh[j], (eval(&p) - eval(&m)) / (2.0 * h), "sh");
        }
    }
}
