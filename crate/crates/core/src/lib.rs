//! Community-based personalization of mood classifiers: cohort ingestion,
//! user profiling and similarity, community detection, evaluation protocols
//! and a synthetic cohort generator.

pub mod cli;
pub mod cohort;
pub mod community;
pub mod error;
pub mod forest;
pub mod metrics;
pub mod profile;
pub mod protocols;
pub mod sampling;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
