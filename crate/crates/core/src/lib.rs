//! Online metro origin-destination forecasting.
//!
//! The pipeline runs from smart-card style transaction logs to compressed
//! incomplete-OD / unfinished-order / DO snapshots, through a sequence-to-sequence
//! model of graph-convolutional GRUs coupled by dual cross-attention, to
//! network-wide MAPE against a historical-average baseline.

pub mod aggregation;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod hiam;
pub mod nncore;
pub mod synthgen;
#[cfg(test)]
pub(crate) mod testkit;
pub mod topology;
pub mod training;

pub use error::{Error, Result};
