//! Density-equalized pixel abstraction of large multiclass scatterplots.
//!
//! The pipeline partitions points into iso-density clusters, maps each
//! cluster's data density to a visual density through the cumulative
//! distribution of densities, splits the resulting pixel budget among the
//! classes with outlier emphasis, and places one class per pixel inside the
//! cluster footprint with a kd-style dispersion. [`pipeline::abstract_points`]
//! runs all of it in memory; [`pipeline::run`] adds file I/O.

pub mod allocate;
pub mod dataset;
pub mod equalize;
pub mod error;
pub mod layout;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod render;
pub mod synth;

pub use dataset::{CanvasSpec, ClassId, Point, PointSet};
pub use error::{Error, Result};
pub use pipeline::{abstract_points, run, AbstractionParams, LInit, RunConfig};
