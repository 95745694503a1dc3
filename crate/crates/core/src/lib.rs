//! Continuous cross-resolution change detection.
//!
//! Bitemporal image pairs whose resolutions differ by an arbitrary ratio are
//! mapped to a binary change mask at the resolution of the sharper image.

pub mod coordspace;
pub mod data;
pub mod decoder;
pub mod edges;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synthesis;

pub use error::{Error, Result};
