//! Training-free virtual try-on.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`ingest`]: rasters, keypoints, IUV maps and latent tensors with their file formats.
//! * [`geometry`]: part-wise garment morphing with per-part homographies.
//! * [`proxy`]: the pose-preserving, garment-free proxy image.
//! * [`ppg`]: diffusion sampling with codebook noise selected against the proxy latent.
//! * [`attention`]: dual-stream person/garment attention rules and positional index realignment.
//! * [`pipeline`]: job configuration and end-to-end orchestration.
//! * [`bridge`]: the stdio protocol used to drive an external diffusion backbone.

pub mod attention;
pub mod bridge;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod pipeline;
pub mod ppg;
pub mod proxy;
pub mod resample;

pub use error::{Error, Result};
