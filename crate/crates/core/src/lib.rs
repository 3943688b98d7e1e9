//! Anomaly prediction for hourly server KPI logs.
//!
//! The pipeline forecasts next-hour KPI features with per-target random
//! forests, decides whether the forecast indicates an anomaly with a
//! two-layer stacking classifier, and grades flagged anomalies as low,
//! medium or high with a 3-nearest-neighbour model trained on
//! severity-weighted replicas. A deterministic fleet simulator and the
//! evaluation metrics used to judge each stage are included.

pub mod datamodel;
pub mod error;
pub mod forecast;
pub mod identify;
pub mod ingest;
pub mod metrics;
pub mod neighbors;
pub mod pipeline;
pub mod rng;
pub mod severity;
pub mod synthgen;
pub mod tree;

pub use error::{Error, Result};
