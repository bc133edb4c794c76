//! Dual-stage mandibular canal segmentation on CBCT-like volumes.
//!
//! A histogram-driven window normalizes each scan, a deeply supervised
//! attention U-Net localizes both canals on a downsampled volume, and a
//! multi-scale residual U-Net segments each canal inside its own volume of
//! interest. Masks are merged back to full resolution and cleaned up with
//! binary morphology.

pub mod error;
pub mod metrics;
pub mod nets;
pub mod phantom;
pub mod pipeline;
pub mod train;
pub mod postproc;
pub mod volgrid;
pub mod windowing;

pub use error::{Error, Result};
