//! Pose-invariant audio-visual speaker extraction toolkit.
//!
//! - [`geometry`]: face geometry decomposition, UV maps and landmark
//!   self-alignment.
//! - [`dsp`]: waveforms, SNR mixing, SI-SDR / SDR / STOI, WAV I/O.
//! - [`autodiff`]: reverse-mode differentiation over dense tensors.
//! - [`model`]: the mask-based extraction network with two-view visual
//!   fusion.
//! - [`data`]: deterministic synthetic audio-visual corpus.
//! - [`harness`]: training, multi-view evaluation, ablations and the CLI.

pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod parallel;

pub use error::{Error, Result};
