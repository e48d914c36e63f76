//! Multi-view diffusion sampling coupled with feed-forward 3D Gaussian reconstruction.
//!
//! At every denoising step the clean estimates of all views are reconstructed into a
//! Gaussian cloud, re-rendered at the same poses, and the renders drive the posterior
//! step. Networks are toy sized and run on the CPU.

mod error;

pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod ftc;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reconstructor;
pub mod rng;
pub mod scheduler;
pub mod splat_op;

pub use error::{Error, Result};
