//! Magnitude/derivative dual-encoder segmentation for hyperspectral cubes.
//!
//! The pipeline: [`spectra`] turns a reflectance cube into magnitude and
//! derivative inputs, [`network`] encodes each with its own convolutional
//! encoder, [`fusion`] blends the two branches per pixel with learned
//! attention weights, and [`losses`] trains everything with cross-entropy
//! plus the adaptive-softmax and class-wise contrastive terms. [`metrics`]
//! scores predictions and [`harness`] drives training, evaluation and
//! ablations.

pub mod autograd;
pub mod data;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod network;
pub mod par;
pub mod params;
pub mod rng;
pub mod spectra;
pub mod tensor;

pub use error::{Error, Result};
