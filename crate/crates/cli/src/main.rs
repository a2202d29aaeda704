//! `splat`: batch front end for the planar Gaussian splatting toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "splat",
    version,
    about = "Sparse-view planar Gaussian splatting tools"
)]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Renderer worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a Gaussian cloud from a confidence-filtered point cloud.
    Init(InitArgs),
    /// Render color, plane-distance depth, normals and alpha.
    Render(RenderArgs),
    /// Forward-warp an image into another camera using its depth.
    Warp(WarpArgs),
    /// Circle-interpolated pseudo cameras between nearest neighbors.
    PseudoCams(PseudoCamsArgs),
    /// Patch-border normal-supervision mask.
    Mask(MaskArgs),
    /// Evaluate a single loss term on files.
    #[command(subcommand)]
    Loss(LossCommand),
    /// Finite-difference check of the analytic gradients on random scenes.
    Gradcheck(GradcheckArgs),
    /// Optimize a cloud against posed images.
    Train(TrainArgs),
    /// Render views and report PSNR / SSIM (and ATE when given).
    Eval(EvalArgs),
    /// Run the four-configuration ablation on the synthetic two-plane scene.
    Toy(ToyArgs),
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long, default_value_t = splat_core::geometry::CONFIDENCE_THRESHOLD)]
    conf_threshold: f64,
    #[arg(long, default_value_t = 3)]
    sh_degree: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    cloud: PathBuf,
    /// Camera file with an optional index, e.g. `cams.json#2`.
    #[arg(long)]
    camera: String,
    #[arg(long)]
    out_color: Option<PathBuf>,
    /// Plane-distance depth (unnormalized, as composited).
    #[arg(long)]
    out_depth: Option<PathBuf>,
    /// Accumulated view-space z.
    #[arg(long)]
    out_depth_accum: Option<PathBuf>,
    #[arg(long)]
    out_normal: Option<PathBuf>,
    #[arg(long)]
    out_alpha: Option<PathBuf>,
    /// Background color as `r,g,b` in [0, 1].
    #[arg(long, value_delimiter = ',')]
    background: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct WarpArgs {
    #[arg(long)]
    image: PathBuf,
    /// z-depth of the source view (PFM).
    #[arg(long)]
    depth: PathBuf,
    /// Per-pixel confidence (PFM); all ones when omitted.
    #[arg(long)]
    confidence: Option<PathBuf>,
    #[arg(long)]
    src_camera: String,
    #[arg(long)]
    dst_camera: String,
    #[arg(long, default_value_t = splat_core::geometry::CONFIDENCE_THRESHOLD)]
    conf_threshold: f64,
    #[arg(long)]
    out_image: PathBuf,
    #[arg(long)]
    out_mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PseudoCamsArgs {
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long, default_value_t = 2)]
    per_pair: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long, default_value_t = splat_core::geometry::PATCH_SIZE)]
    patch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum LossCommand {
    /// Confidence-aware Pearson depth loss.
    Pearson {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        confidence: Option<PathBuf>,
    },
    /// Masked L1 normal loss.
    Normal {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// L1 + D-SSIM between two images.
    Photometric {
        #[arg(long)]
        render: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = splat_core::losses::LossWeights::default().lambda_dssim)]
        lambda: f64,
    },
    /// Mean smallest scale of a cloud.
    Scale {
        #[arg(long)]
        cloud: PathBuf,
    },
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long, default_value_t = 10)]
    gaussians: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    sh_degree: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TrainConfig as JSON, or TOML with a `.toml` extension.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set w_depth=0.01`; values are JSON.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    /// Estimated z-depth per view (PFM), in camera order.
    #[arg(long, num_args = 1..)]
    depths: Vec<PathBuf>,
    /// Depth confidence per view (PFM); all ones when omitted.
    #[arg(long, num_args = 1..)]
    confidences: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration loss records as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    /// Reference cameras; adds ATE of the camera centers.
    #[arg(long)]
    gt_cameras: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
