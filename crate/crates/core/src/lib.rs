//! Dynamic laser speckle viscometry.
//!
//! The crate covers the whole path from a simulated drop of liquid to a
//! viscosity estimate:
//!
//! 1. [`specklesim`] renders speckle video from Brownian scatterers.
//! 2. [`capturefx`] injects smartphone capture artifacts (flicker, rolling
//!    shutter bars, skew, background light).
//! 3. [`framestore`] reads and writes frame sequences as PGM/PPM files.
//! 4. [`stabilizer`] selects ten usable frames from a distorted capture.
//! 5. [`pipeline`] computes the inter-frame correlation curve, the viscosity
//!    coefficient `V`, the decorrelation time and speckle contrast.
//! 6. [`rheocal`] turns `V` into physical viscosity via a cubic calibration.
//! 7. [`classifier`] trains a one-vs-one RBF SVM on frame-difference images.
//! 8. [`scenario`] generates corpora and runs end-to-end experiments.

// `!(x > 0.0)` is used on purpose to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capturefx;
pub mod classifier;
pub mod error;
pub mod frame;
pub mod framestore;
pub mod pipeline;
pub mod rheocal;
mod rng;
pub mod scenario;
pub mod specklesim;
pub mod stabilizer;
pub mod stats;

pub use error::{Error, Result};
pub use frame::{Channel, Frame, FrameSequence, SequenceMeta};
