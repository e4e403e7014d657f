//! Annotation-free ultrasound plane quality control.
//!
//! A query image is scored by how well its hierarchical features register
//! against a handful of low-variance reference anchors of the same plane.
//! The pipeline is:
//!
//! 1. [`imaging`] renders a synthetic speckled corpus with graded rigid and
//!    non-rigid deformations (plus PGM I/O and the augmentation recipe).
//! 2. [`anchors`] picks per-plane reference anchors by the variance-spectrum
//!    criterion (or one of the random / k-medoids / k-center baselines).
//! 3. [`encoder`] extracts three feature levels with a frozen backbone whose
//!    per-level channel projections carry low-rank plane experts from [`oks`].
//! 4. [`lra`] predicts one affine transform per level and warps the query
//!    features onto the anchor features; [`losses`] measures what is left.
//! 5. [`training`] fits the aligners and experts plane by plane,
//!    [`scoring`] calibrates the loss terms and turns them into a score in
//!    `[0, 1]`, and [`eval`] reports rank and linear correlations.
//!
//! Everything runs on [`numerics`], a small dense tensor type with a
//! reverse-mode tape.

pub mod anchors;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod lra;
pub mod model;
pub mod numerics;
pub mod oks;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
