//! Selective co-training of diffusion policies on mixed human and robot
//! demonstrations.
//!
//! Human action chunks enter the denoising loss only at noise levels where a
//! learned embodiment classifier can no longer tell them apart from robot
//! chunks. The crate bundles everything needed to study that on a synthetic
//! 2D manipulation benchmark: a small numeric core, the diffusion process,
//! the benchmark itself, the classifier, four training regimes, evaluation
//! and an experiment harness.

pub mod classifier;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fmt;
pub mod harness;
pub mod numeric;
pub mod par;
pub mod policy;
pub mod synth;
mod train;
pub use train::LrSchedule;

pub use error::{Error, Result};
