//! Cascaded conditional diffusion for audio-driven talking-head video editing,
//! trained end-to-end on a procedurally generated synthetic talking-face dataset.
//!
//! The pipeline edits a talking clip in two stages. Stage 1 synthesizes
//! dense-landmark motion images for the edit interval from the edited audio,
//! conditioned on the two anchor frames with dynamically weighted in-context
//! blending. Stage 2 interpolates the anchor frames across the interval, warps
//! the interpolations toward the stage-1 landmark geometry with a learned flow
//! network, and refines the coarse warped frames with a warping-guided
//! conditional latent diffusion model.
//!
//! Everything runs on CPU at a desk-scale default of 64x64 / 16x16 latents.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod edit_pipeline;
pub mod error;
pub mod image;
pub mod ipiw;
pub mod landmarks;
pub mod latent_ae;
pub mod metrics;
pub mod motion_diffusion;
pub mod nn;
pub mod refine_diffusion;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
