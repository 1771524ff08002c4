//! Spatial-relation benchmark engine.
//!
//! Procedurally samples scenes with unambiguous egocentric and allocentric
//! direction labels, projects them onto a patch-token grid, trains probing
//! heads on token features and analyzes attention flow between objects.
//!
//! The pipeline, bottom up:
//!
//! - [`geometry`]: frames, relative angles, four-way labels.
//! - [`sampler`]: rejection sampling of layouts and datasets.
//! - [`camera`]: pinhole projection and token-category maps.
//! - [`store`]: manifests, splits, feature and attention files.
//! - [`oracle`]: synthetic token features from geometry.
//! - [`probe`] and [`train`]: heads, AdamW, sweeps.
//! - [`eval`]: protocol runs, ranks, correlation, attention flow.

pub mod camera;
pub mod chart;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod oracle;
pub mod probe;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod store;
pub mod train;

pub use error::{Error, Result};
