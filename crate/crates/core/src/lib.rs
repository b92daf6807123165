//! Feature-adaptation laboratory for the head-probing then fine-tuning
//! (HP-FT) recipe.
//!
//! The crate trains small MLP backbones on synthetic data, probes a task head
//! for `tau` epochs, fine-tunes everything, and measures how much the
//! backbone features move. It also carries the closed-form NTK analysis of
//! the two-layer linear model `q = x Bᵀ v`.

pub mod error;
pub mod experiments;
pub mod models;
pub mod adaptmetrics;
pub mod datagen;
pub mod dynamics;
pub mod ntk_analytics;
pub mod numkernel;
pub mod training;

pub use error::{Error, Result};
