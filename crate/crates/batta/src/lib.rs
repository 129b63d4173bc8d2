//! Prompt-conditioned ViT segmentation with boundary-aware test-time adaptation.
//!
//! The numerical kernels (heatmaps, Sobel maps, masked Pearson alignment,
//! gating, metrics) live in `batta_core`; this crate holds the candle model,
//! the adaptation driver, the synthetic benchmark, reporting and the CLI.

pub mod bridge;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
mod error;
pub mod experiment;
pub mod gradcam;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod report;
pub mod train;
pub mod tta;

pub use error::{Error, Result};
