//! Conditional flow-matching segmentation.
//!
//! A time-dependent velocity field transports Gaussian noise to a signed
//! one-hot encoding of the segmentation mask. The field is a two-stream
//! network: a time-free condition UNet reads the image, and a time-conditioned
//! flow UNet receives its features through a dual-branch spatial gate at the
//! first encoder stage and frequency-aware attention at the bottleneck.

pub mod cli;
pub mod data;
pub mod dbsa;
pub mod error;
pub mod fa_attention;
pub mod flow_core;
pub mod losses_training;
pub mod metrics;
pub mod networks;
pub mod params;
pub mod sampling;

pub use error::{Error, Result};
