//! Keyframe interpolation with bidirectional video diffusion.
//!
//! A small image-to-video denoiser is pretrained on synthetic clips with a
//! clear arrow of time, adapted to generate time-reversed motion by injecting
//! 180-degree rotated temporal attention maps while tuning only the value and
//! output projections, and finally sampled in both directions at once with the
//! two predictions fused at every step.

pub mod checkpoint;
pub mod config;
mod container;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod nn;
pub mod sampling;
pub mod schedule;
pub mod temporal;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
