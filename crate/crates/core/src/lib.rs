//! Graph-structured denoising diffusion for lifting single-frame 2D keypoint
//! detections to 3D human poses.
//!
//! The crate is organised bottom-up:
//!
//! * [`skeleton`] defines the joint graph and its affinity matrices.
//! * [`schedule`] precomputes linear and cosine noise schedules.
//! * [`diffusion`] holds the forward corruption and the DDPM / DDIM samplers.
//! * [`denoiser`] is the modulated-GCN noise predictor with hand-written
//!   backpropagation.
//! * [`training`] implements the joint noise + 2D reconstruction objective and
//!   the Adam training loop.
//! * [`evaluation`] computes MPJPE / P-MPJPE reports.
//! * [`data`] handles pose files, normalisation and synthetic toy data.
//!
//! Pose matrices are stored row-per-joint (`J x C`), i.e. the transpose of the
//! column-per-node convention often used to write GCN layers.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod rng;
pub mod schedule;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};
