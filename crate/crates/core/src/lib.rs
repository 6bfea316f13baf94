//! Hierarchical feed-forward 3D Gaussian splatting.
//!
//! Two or more posed images go in; three nested scales of pixel-aligned
//! Gaussians come out. Stage 1 estimates quarter-resolution depth from a
//! plane-sweep cost volume; stages 2 and 3 render the previous stage, look
//! at where it is wrong, and refine depth within a bounded band while
//! damping the opacity of earlier Gaussians that caused the error.

pub mod backbone;
pub mod camera;
pub mod config;
pub mod depth;
pub mod error;
pub mod error_aware;
pub mod fusion;
pub mod gaussians;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod sh;
pub mod train;

pub use error::{CoreError, Result};
