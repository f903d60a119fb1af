//! Mobility classification, transit contact networks and traced S-I-R
//! epidemic simulation built from smart-card trip records.
//!
//! The pipeline runs in stages, each living in its own module:
//!
//! * [`trip_ingest`] parses, validates and profiles trip CSV files.
//! * [`synth`] generates synthetic city-scale trip datasets.
//! * [`mobility`] computes radius of gyration, k-radius and encounter counts.
//! * [`classifier`] assigns each passenger one of eight mobility groups.
//! * [`contact`] builds vehicle presence timelines and exposure events.
//! * [`sim`] runs the traced S-I-R process over the exposure stream.
//! * [`flow`] aggregates infection traces into per-group flow matrices.
//! * [`experiment`] wires the stages together for the command line tool.

pub mod classifier;
pub mod contact;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod mobility;
pub mod sim;
pub mod synth;
pub mod trip_ingest;

pub use error::{Error, Result};

/// Seconds since the Unix epoch.
pub type Timestamp = i64;

/// A span of time in seconds.
pub type Seconds = i64;
