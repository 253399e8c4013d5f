//! Differentiable 3D Gaussian splatting.

pub mod backward;
pub mod camera;
pub mod cloud;
pub mod gradcheck;
pub mod ply;
pub mod project;
pub mod raster;

use thiserror::Error;

pub use backward::{render_backward, CloudGradients};
pub use camera::{CameraPose, ViewProjection};
pub use cloud::{GaussianCloud, ParamGroup, SH_C0};
pub use ply::{load_ply, read_ply, save_ply, write_ply, PlyError};
pub use project::{project_gaussian, ProjectedSplat};
pub use raster::{render, Contribution, PreparedSplat, RenderOutput};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("render contract violated: {0}")]
    Contract(String),
    #[error("invalid camera: {0}")]
    Camera(String),
}
