//! Global-local correspondence anomaly detection.
//!
//! A frozen hierarchical encoder produces a three-level feature pyramid. A
//! semantic bottleneck compresses it into a global semantic representation
//! and an original patch representation; three decoder heads map those back
//! to feature pyramids. Estimation errors of the local and global branches,
//! calibrated on anomaly-free data and fused across scales, give pixel maps
//! and image scores for both structural and logical anomalies.

pub mod archive;
pub mod backbone;
pub mod bottleneck;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod heads;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod scoring;
pub mod training;

pub use error::{GlcfError, Result};
