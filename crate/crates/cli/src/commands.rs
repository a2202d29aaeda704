use std::path::{Path, PathBuf};

use serde::Serialize;
use splat_core::geometry;
use splat_core::io;
use splat_core::losses;
use splat_core::metrics;
use splat_core::optim::gradcheck::{self, LossSelector};
use splat_core::optim::{self, TrainConfig, TrainState, TrainView};
use splat_core::raster::{RenderSettings, Renderer};
use splat_core::toy;
use splat_core::{Camera, ConfidenceMap, DepthSemantics, PixelMask};
use thiserror::Error;

use crate::{
    Cli, Command, EvalArgs, GradcheckArgs, InitArgs, LossCommand, RenderArgs, TrainArgs, WarpArgs,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] splat_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Init(a) => init(a),
        Command::Render(a) => render(a, cli.threads),
        Command::Warp(a) => warp(a),
        Command::PseudoCams(a) => {
            let cams = io::read_cameras(&a.cameras)?;
            let pseudo = geometry::pseudo_cameras(&cams, a.per_pair)?;
            io::write_cameras(&a.out, &pseudo)?;
            println!("pseudo cameras: {}", pseudo.len());
            Ok(())
        }
        Command::Mask(a) => {
            let mask = geometry::patch_border_mask(a.width, a.height, a.patch)?;
            let total = a.width * a.height;
            if let Some(out) = &a.out {
                io::write_pfm(out, &io::mask_to_map(&mask))?;
            }
            println!("masked pixels: {} of {}", total - mask.count(), total);
            Ok(())
        }
        Command::Loss(c) => loss(c),
        Command::Gradcheck(a) => run_gradcheck(a, cli.seed),
        Command::Train(a) => train(a, cli.seed, cli.threads),
        Command::Eval(a) => eval(a, cli.threads),
        Command::Toy(a) => {
            let results = toy::ablation(a.iterations, cli.seed)?;
            println!(
                "{:<24} {:>9} {:>8} {:>11}",
                "config", "psnr_db", "ssim", "depth_err"
            );
            for r in &results {
                println!(
                    "{:<24} {:>9.3} {:>8.4} {:>11.4}",
                    r.name, r.psnr_db, r.ssim, r.depth_error
                );
            }
            if let Some(out) = &a.out {
                write_json(out, &results)?;
            }
            Ok(())
        }
    }
}

/// Parses `path#index`; a bare path selects camera 0.
pub fn read_camera(arg: &str) -> Result<Camera> {
    let (path, index) = match arg.rsplit_once('#') {
        Some((p, i)) => {
            let i = i
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad camera index in {arg:?}")))?;
            (p, i)
        }
        None => (arg, 0),
    };
    let cams = io::read_cameras(Path::new(path))?;
    let n = cams.len();
    cams.into_iter().nth(index).ok_or_else(|| {
        CliError::Usage(format!(
            "camera index {index} out of range ({n} cameras in {path})"
        ))
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn read_confidence(path: Option<&PathBuf>, dims: (usize, usize)) -> Result<ConfidenceMap> {
    match path {
        Some(p) => Ok(io::map_to_confidence(&io::read_pfm(p)?)?),
        None => Ok(ConfidenceMap::filled(dims.0, dims.1, 1.0)),
    }
}

fn init(a: InitArgs) -> Result<()> {
    let points = io::read_points(&a.points)?;
    let cams = io::read_cameras(&a.cameras)?;
    let kept = points.filtered(a.conf_threshold)?;
    let cloud = optim::init_from_points(&kept, &cams, a.sh_degree)?;
    io::write_cloud(&a.out, &cloud)?;
    log::info!(
        "kept {} of {} points at confidence >= {}",
        kept.len(),
        points.len(),
        a.conf_threshold
    );
    println!("gaussians: {}", cloud.len());
    Ok(())
}

fn render(a: RenderArgs, threads: usize) -> Result<()> {
    let cloud = io::read_cloud(&a.cloud)?;
    let cam = read_camera(&a.camera)?;
    let mut settings = RenderSettings::default().with_threads(threads);
    if let Some(bg) = &a.background {
        let [r, g, b] = bg[..] else {
            return Err(CliError::Usage(format!(
                "--background needs 3 values, got {}",
                bg.len()
            )));
        };
        settings.background = [r, g, b];
    }
    let out = Renderer::new(settings).render(&cloud, &cam)?;
    let (w, h) = out.dims();
    if let Some(p) = &a.out_color {
        io::write_ppm(p, &out.color)?;
    }
    if let Some(p) = &a.out_depth {
        io::write_pfm(p, &io::depth_to_map(&out.depth_plane))?;
    }
    if let Some(p) = &a.out_depth_accum {
        io::write_pfm(p, &io::depth_to_map(&out.depth_accum))?;
    }
    if let Some(p) = &a.out_normal {
        io::write_pfm(p, &io::normals_to_map(&out.normals))?;
    }
    if let Some(p) = &a.out_alpha {
        io::write_pfm(p, &io::scalar_map(w, h, &out.alpha))?;
    }
    let covered = out.alpha.iter().filter(|a| **a > 0.0).count();
    println!("rendered {w}x{h}, covered pixels: {covered}");
    Ok(())
}

fn warp(a: WarpArgs) -> Result<()> {
    let img = io::read_ppm(&a.image)?;
    let depth = io::map_to_depth(&io::read_pfm(&a.depth)?, DepthSemantics::Estimated)?;
    let conf = read_confidence(a.confidence.as_ref(), depth.dims())?;
    let src = read_camera(&a.src_camera)?;
    let dst = read_camera(&a.dst_camera)?;
    let (out, mask) = geometry::warp(&img, &depth, &conf, &src, &dst, a.conf_threshold)?;
    io::write_ppm(&a.out_image, &out)?;
    if let Some(p) = &a.out_mask {
        io::write_pfm(p, &io::mask_to_map(&mask))?;
    }
    println!("valid pixels: {} of {}", mask.count(), mask.values.len());
    Ok(())
}

fn read_mask(path: Option<&PathBuf>, dims: (usize, usize)) -> Result<PixelMask> {
    match path {
        Some(p) => Ok(io::map_to_mask(&io::read_pfm(p)?)?),
        None => Ok(PixelMask::filled(dims.0, dims.1, true)),
    }
}

fn loss(c: LossCommand) -> Result<()> {
    let value = match c {
        LossCommand::Pearson {
            pred,
            target,
            confidence,
        } => {
            let p = io::map_to_depth(&io::read_pfm(&pred)?, DepthSemantics::Estimated)?;
            let t = io::map_to_depth(&io::read_pfm(&target)?, DepthSemantics::Estimated)?;
            let conf = read_confidence(confidence.as_ref(), p.dims())?;
            losses::pearson_depth_loss(&p, &t, &conf)?
        }
        LossCommand::Normal { pred, target, mask } => {
            let p = io::map_to_normals(&io::read_pfm(&pred)?)?;
            let t = io::map_to_normals(&io::read_pfm(&target)?)?;
            let mask = read_mask(mask.as_ref(), p.dims())?;
            losses::normal_loss(&p, &t, &mask)?
        }
        LossCommand::Photometric {
            render,
            gt,
            mask,
            lambda,
        } => {
            let r = io::read_ppm(&render)?;
            let g = io::read_ppm(&gt)?;
            match mask {
                Some(m) => losses::masked_photometric_loss(
                    &r,
                    &g,
                    &read_mask(Some(&m), r.dims())?,
                    lambda,
                )?,
                None => losses::photometric_loss(&r, &g, lambda)?,
            }
        }
        LossCommand::Scale { cloud } => losses::scale_loss(&io::read_cloud(&cloud)?)?,
    };
    println!("{value}");
    Ok(())
}

#[derive(Serialize)]
struct SceneReport {
    seed: u64,
    selector: LossSelector,
    report: gradcheck::GradcheckReport,
}

fn run_gradcheck(a: GradcheckArgs, seed: u64) -> Result<()> {
    let selectors = [
        LossSelector::Photometric,
        LossSelector::Depth,
        LossSelector::Normal,
        LossSelector::Scale,
    ];
    let mut all = Vec::new();
    let mut failures = Vec::new();
    for s in 0..a.scenes as u64 {
        let scene_seed = seed.wrapping_add(s);
        for (selector, report) in
            gradcheck::check_random_scene(scene_seed, a.gaussians, a.size, a.sh_degree, &selectors)?
        {
            println!(
                "scene {scene_seed} {:<12} max rel err {:.3e} {}",
                format!("{selector:?}").to_lowercase(),
                report.max_relative_error(),
                if report.passed() { "ok" } else { "FAIL" }
            );
            if !report.passed() {
                failures.push(format!(
                    "scene {scene_seed} {selector:?}: {}",
                    report.failing_groups().join(", ")
                ));
            }
            all.push(SceneReport {
                seed: scene_seed,
                selector,
                report,
            });
        }
    }
    if let Some(out) = &a.out {
        write_json(out, &all)?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failures.join("; ")))
    }
}

/// Applies `key=value` overrides by round-tripping the config through JSON.
fn apply_overrides(cfg: TrainConfig, overrides: &[String]) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {o:?} is not KEY=VALUE")))?;
        let obj = value
            .as_object_mut()
            .expect("config serializes to an object");
        if !obj.contains_key(key) {
            return Err(CliError::Usage(format!("unknown config field {key:?}")));
        }
        let parsed = serde_json::from_str(raw)
            .map_err(|e| CliError::Usage(format!("value of {key}: {e}")))?;
        obj.insert(key.to_string(), parsed);
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid override: {e}")))
}

#[derive(Serialize)]
struct TrainMeta<'a> {
    config: &'a TrainConfig,
    iterations: usize,
    gaussians: usize,
    final_loss: Option<f64>,
}

fn train(a: TrainArgs, seed: u64, threads: usize) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    cfg = apply_overrides(cfg, &a.overrides)?;
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    cfg.seed = seed;
    cfg.threads = threads;
    cfg.validate()?;

    let cams = io::read_cameras(&a.cameras)?;
    if a.images.len() != cams.len() {
        return Err(CliError::Usage(format!(
            "{} images for {} cameras",
            a.images.len(),
            cams.len()
        )));
    }
    if !a.depths.is_empty() && a.depths.len() != cams.len() {
        return Err(CliError::Usage(format!(
            "{} depth maps for {} cameras",
            a.depths.len(),
            cams.len()
        )));
    }
    if !a.confidences.is_empty() && a.confidences.len() != a.depths.len() {
        return Err(CliError::Usage(
            "confidences must match depth maps one to one".into(),
        ));
    }
    let mut views = Vec::with_capacity(cams.len());
    for (i, cam) in cams.iter().enumerate() {
        let name = a.images[i]
            .file_stem()
            .map_or(format!("view_{i}"), |s| s.to_string_lossy().into_owned());
        let mut view = TrainView::new(name, cam.clone(), io::read_ppm(&a.images[i])?)?;
        if let Some(dp) = a.depths.get(i) {
            let depth = io::map_to_depth(&io::read_pfm(dp)?, DepthSemantics::Estimated)?;
            let conf = read_confidence(a.confidences.get(i), depth.dims())?;
            view = view.with_depth(depth, conf, cfg.patch_size, cfg.conf_threshold)?;
        }
        views.push(view);
    }
    let pseudo = if cfg.w_pseudo > 0.0 && !a.depths.is_empty() && views.len() >= 3 {
        optim::build_pseudo_views(&views, cfg.pseudo_views_per_pair, cfg.conf_threshold)?
    } else {
        Vec::new()
    };
    let cloud = io::read_cloud(&a.cloud)?;
    let state = TrainState::new(cloud, optim::scene_extent(&cams), cfg.seed);
    log::info!(
        "training {} gaussians on {} views and {} pseudo views for {} iterations",
        state.cloud.len(),
        views.len(),
        pseudo.len(),
        cfg.iterations
    );
    let state = optim::train(state, &views, &pseudo, &cfg)?;
    let final_loss = state.history.last().map(|r| r.total);
    io::write_checkpoint(
        &a.out,
        &state.cloud,
        &TrainMeta {
            config: &cfg,
            iterations: state.iteration,
            gaussians: state.cloud.len(),
            final_loss,
        },
    )?;
    if let Some(p) = &a.history {
        write_json(p, &state.history)?;
    }
    println!(
        "gaussians: {}, final loss: {}",
        state.cloud.len(),
        final_loss.map_or("n/a".to_string(), |l| format!("{l:.6}"))
    );
    Ok(())
}

fn eval(a: EvalArgs, threads: usize) -> Result<()> {
    let cloud = io::read_cloud(&a.cloud)?;
    let cams = io::read_cameras(&a.cameras)?;
    if a.images.len() != cams.len() {
        return Err(CliError::Usage(format!(
            "{} images for {} cameras",
            a.images.len(),
            cams.len()
        )));
    }
    let renderer = Renderer::new(RenderSettings::default().with_threads(threads));
    let mut names = Vec::new();
    let mut renders = Vec::new();
    let mut gts = Vec::new();
    for (cam, path) in cams.iter().zip(&a.images) {
        names.push(
            path.file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        );
        renders.push(renderer.render(&cloud, cam)?.color);
        gts.push(io::read_ppm(path)?);
    }
    let centers = |c: &[Camera]| c.iter().map(|c| c.center).collect::<Vec<_>>();
    let gt_centers = match &a.gt_cameras {
        Some(p) => Some(centers(&io::read_cameras(p)?)),
        None => None,
    };
    let est = centers(&cams);
    let report = metrics::eval_report(
        &names,
        &renders,
        &gts,
        gt_centers.as_deref().map(|g| (est.as_slice(), g)),
    )?;
    print!("{}", report.to_table());
    if let Some(p) = &a.out {
        io::write_atomic(p, report.to_json().as_bytes())?;
    }
    Ok(())
}
