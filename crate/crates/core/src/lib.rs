//! Multi-modal gemstone classification pipeline.
//!
//! The crate covers the whole flow: instrument-data preprocessing and
//! validation ([`ingest`]), synthetic benchmark corpora with an exact Bayes
//! oracle ([`synthgen`]), the differentiable primitives ([`netprims`]) and the
//! fusion network built on them ([`model`]), k-fold training ([`train`]),
//! confidence thresholding ([`calibrate`]) and reporting ([`evaluate`]).
//!
//! Network math is generic over the scalar type (f32 for speed, f64 for
//! gradient verification); concrete aliases live at the crate root.

pub mod calibrate;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod model;
pub mod netprims;
pub mod scalar;
pub mod seeding;
pub mod synthgen;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision fusion network (training default).
pub type Model32 = model::MultiModalNet<f32>;
/// Double-precision fusion network (gradient-check / verification mode).
pub type Model64 = model::MultiModalNet<f64>;
