//! CPU-only volumetric segmentation of abdominal organs.
//!
//! The crate covers the whole inference path for a small factorized 3D CNN:
//! NIfTI input/output, windowing and spline resampling, the network built as
//! a computational graph, compile-time graph rewrites, a multithreaded
//! executor with a static memory plan, argmax/upsampling postprocessing, and
//! the DSC/NSD metrics. The training-side math (soft Dice loss, its gradient,
//! augmentations) lives in [`train`].

pub mod engine;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod train;
pub mod volume_io;

pub use error::{Error, Result};
