//! Differentiable 3D Gaussian splatting.
//!
//! Gaussians are projected with the EWA linearization, sorted by camera depth and
//! alpha-composited per pixel without tile binning. [`render_backward`] returns exact
//! gradients of a scalar image loss with respect to every Gaussian attribute.

mod camera;
mod cloud;
mod gradcheck;
mod ply;
mod project;
mod raster;

pub use camera::CameraPose;
pub use cloud::{CloudGradients, GaussianCloud, PACKED_STRIDE};
pub use gradcheck::{render_gradcheck, ConstantLoss, GradcheckReport, ImageLoss, L2ToTarget};
pub use ply::{write_ply, PLY_SH_C0};
pub use project::{covariance_3d, project, Projected};
pub use raster::{render, render_backward, RenderOutput, RenderSettings};

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("quaternion {0} has zero norm")]
    ZeroQuaternion(usize),
    #[error("invalid gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("attribute arrays disagree in length")]
    LengthMismatch,
    #[error("gradient buffer has {got} values, expected {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RenderError>;
