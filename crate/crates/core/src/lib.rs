//! Sparse-view planar Gaussian splatting on the CPU.
//!
//! The crate renders flattened 3D Gaussians (color, plane-distance depth,
//! center depth, normals), differentiates the renderer analytically, and
//! provides the depth/normal regularizers, depth-warped pseudo views and the
//! training loop built on top of them.

pub mod dual;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod sh;
pub mod ssim;
pub mod synthetic;
pub mod toy;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
