//! Reconstructive contrastive learning on synthetic shortcut datasets.
//!
//! This crate implements a dual-branch self-supervised learner (an inpainting
//! reconstruction branch plus an InfoNCE contrastive branch over a shared
//! encoder), the Colorful-MNIST shortcut dataset it is studied on, linear-probe
//! evaluation, and a synthetic RF-heatmap pipeline with signal-processing-based
//! region-of-interest detection.

#![allow(clippy::too_many_arguments)]

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rf;
pub mod seed;
pub mod train;

pub use error::RclError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, RclError>;
