//! Two-stage 3D U-Net segmentation of head-and-neck organs at risk.
//!
//! A locator network finds a fixed-size bounding box for one structure in a
//! 4× downsampled CT volume; a segmentation network then labels the
//! structure inside that box at full resolution.

pub mod cli;
pub mod error;
pub mod experiment;
pub mod io;
pub mod locator;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod volume;

pub use error::{Error, Result};
