//! Color-event single-object tracking toolkit.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`event_io`]: event streams, annotation files and a synthetic scene generator.
//! * [`voxel`]: sparse voxelization of event windows, region filtering and top-k selection.
//! * [`repr`]: dense event images (event frames, time surfaces, early-fusion blends).
//! * [`model`]: forward pass of the unified color-event transformer and its tracking head.
//! * [`loss`]: focal, L1 and GIoU training losses with analytic gradients.
//! * [`eval`]: SR/PR/NPR curves, attribute breakdowns and the BOC score.

pub mod bbox;
pub mod config;
pub mod error;
pub mod eval;
pub mod event_io;
pub mod loss;
pub mod model;
pub mod repr;
pub mod selftest;
pub mod voxel;

pub use bbox::{BBox, CenterBox};
pub use error::{Error, Result};
