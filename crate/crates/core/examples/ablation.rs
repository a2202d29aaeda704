//! Runs the four-configuration ablation on the synthetic two-plane scene.
//!
//! Usage: `ablation [iterations] [seed]`

use splat_core::toy;

fn main() -> splat_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    for r in toy::ablation(iterations, seed)? {
        println!(
            "{:<24} psnr {:7.3} train {:7.3} ssim {:.4} depth_err {:.4} n {} {:.1}s",
            r.name, r.psnr_db, r.train_psnr_db, r.ssim, r.depth_error, r.gaussians, r.seconds
        );
    }
    Ok(())
}
