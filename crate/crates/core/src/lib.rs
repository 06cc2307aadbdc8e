//! Diffusion-based expansion of paired image/mask segmentation datasets.
//!
//! The pipeline trains a mask-conditional denoiser and a noise-conditional
//! segmenter on a small corpus, synthesizes new mask/image pairs by guided
//! probability-flow sampling, filters them by Dice loss under a fixed
//! segmenter, and measures the effect on a freshly trained validator.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod expansion;
pub mod export;
pub mod guidance;
pub mod lemmas;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
