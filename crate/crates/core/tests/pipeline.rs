use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splat_core::io::{self, PointCloud};
use splat_core::optim::{self, TrainConfig, TrainState, TrainView};
use splat_core::raster::Renderer;
use splat_core::{losses, synthetic, toy, ConfidenceMap, DepthMap, DepthSemantics};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn files_to_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let scene = toy::toy_scene(24, toy::BASELINE_DEG, toy::HELDOUT_DEG);
    let renderer = Renderer::default();

    let cams_path = dir.path().join("cams.json");
    io::write_cameras(&cams_path, &scene.train_cameras).unwrap();
    let mut image_paths = Vec::new();
    for (i, cam) in scene.train_cameras.iter().enumerate() {
        let path = dir.path().join(format!("view{i}.ppm"));
        io::write_ppm(&path, &renderer.render(&scene.cloud, cam).unwrap().color).unwrap();
        image_paths.push(path);
    }
    let n = scene.cloud.len();
    let points = PointCloud {
        positions: scene.cloud.means.iter().map(|m| m.map(|v| v as f32)).collect(),
        colors: vec![[128; 3]; n],
        confidences: Some((0..n).map(|i| if i % 4 == 0 { 0.1 } else { 0.9 }).collect()),
    };
    let points_path = dir.path().join("points.ply");
    io::write_points(&points_path, &points).unwrap();

    let cams = io::read_cameras(&cams_path).unwrap();
    assert_eq!(cams, scene.train_cameras);
    let kept = io::read_points(&points_path).unwrap().filtered(0.2).unwrap();
    assert_eq!(kept.len(), n - n.div_ceil(4));
    let init = optim::init_from_points(&kept, &cams, 0).unwrap();
    assert_eq!(init.len(), kept.len());

    let views: Vec<TrainView> = cams
        .iter()
        .zip(&image_paths)
        .enumerate()
        .map(|(i, (c, p))| TrainView::new(format!("view{i}"), c.clone(), io::read_ppm(p).unwrap()).unwrap())
        .collect();
    let cfg = TrainConfig {
        iterations: 150,
        sh_degree: 0,
        w_depth: 0.0,
        w_normal: 0.0,
        w_scale: 0.0,
        w_pseudo: 0.0,
        ..TrainConfig::default()
    };
    let state = TrainState::new(init, optim::scene_extent(&cams), cfg.seed);
    let state = optim::train(state, &views, &[], &cfg).unwrap();

    let h = &state.history;
    assert_eq!(h.len(), 150);
    assert!(h.iter().all(|r| r.total.is_finite()));
    assert!(h.windows(2).all(|w| w[1].gaussians <= w[0].gaussians));
    let first: Vec<f64> = h[..15].iter().map(|r| r.total).collect();
    let last: Vec<f64> = h[h.len() - 15..].iter().map(|r| r.total).collect();
    assert!(mean(&last) < 0.5 * mean(&first), "{} -> {}", mean(&first), mean(&last));

    let ckpt = dir.path().join("trained.ply");
    io::write_cloud(&ckpt, &state.cloud).unwrap();
    assert_eq!(io::read_cloud(&ckpt).unwrap(), state.cloud);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn render_outputs_stay_in_range(seed in any::<u64>(), count in 0usize..30, sh in 0usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = synthetic::default_camera(20);
        let cloud = synthetic::random_scene(&mut rng, &cam, count, sh);
        let out = Renderer::default().render(&cloud, &cam).unwrap();
        prop_assert!(out.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!(out.color.values.iter().flatten().all(|c| c.is_finite()));
        for (p, d) in out.depth_plane.values.iter().enumerate() {
            prop_assert!(d.is_nan() || *d >= 0.0);
            prop_assert_eq!(d.is_nan(), out.alpha[p] == 0.0);
        }
    }

    #[test]
    fn pearson_is_symmetric_under_uniform_confidence(
        p in prop::collection::vec(0.1f64..20.0, 30),
        t in prop::collection::vec(0.1f64..20.0, 30),
    ) {
        let dp = DepthMap::new(6, 5, p, DepthSemantics::Estimated).unwrap();
        let dt = DepthMap::new(6, 5, t, DepthSemantics::Estimated).unwrap();
        let c = ConfidenceMap::filled(6, 5, 0.7);
        let a = losses::pearson_depth_loss(&dp, &dt, &c).unwrap();
        let b = losses::pearson_depth_loss(&dt, &dp, &c).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&a));
    }
}
