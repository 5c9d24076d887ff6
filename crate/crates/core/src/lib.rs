//! Estimate the effects of a randomized cash-transfer program on household
//! wealth from geocoded program records, satellite-derived building polygons,
//! and an Engel-curve calibration survey.
//!
//! Pipeline: ingest the census, survey, building, and night-light inputs;
//! classify roof materials; rasterize treatment intensity and housing
//! outcomes onto the analysis grid; estimate per-$1,000 effects with Conley
//! spatial standard errors; link buildings and surveys to census coordinates;
//! fit Engel curves on the control arm; and scale the remotely sensed effects
//! into currency units with Delta-method intervals. A synthetic-RCT generator
//! with known ground truth backs the end-to-end tests.

pub mod econ;
pub mod geo;
pub mod ingest;
pub mod kv;
pub mod matching;
pub mod measures;
pub mod rasterize;
pub mod roof;
pub mod synth;

pub use measures::{Proxy, Welfare};
