//! Phase-aware dynamic images and a dual-stream cross-attention classifier
//! for micro-expression recognition.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndcore`]: dense tensors, a define-by-run gradient tape, Adam and a
//!   finite-difference gradient checker.
//! * [`dynimg`]: approximate rank pooling over onset→apex and apex→offset
//!   segments, plus the `DIR1` raster file format.
//! * [`data`]: frame-sequence loading, a synthetic corpus generator,
//!   augmentation, resizing and leave-one-subject-out splits.
//! * [`model`]: the per-stream CNN backbone, the fusion strategies and the
//!   MLP head.
//! * [`objective`]: cross-entropy, cosine consistency and accuracy.
//! * [`harness`]: training with early stopping, LOSO, ablations, reports.

pub mod data;
pub mod dynimg;
pub mod error;
pub mod harness;
pub mod model;
pub mod ndcore;
pub mod objective;
pub mod raster;
pub mod seed;

pub use error::{Error, Result};
pub use raster::Raster;
