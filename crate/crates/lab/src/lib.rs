//! sharpness-lab: command-line laboratory around `sharpness-core`.
//!
//! Subcommands: `toy` (two-parameter trajectories), `train`, `grid`,
//! `measure` and `correlate`. Everything is deterministic given the seeds
//! in the config; CSV and checkpoint files round-trip exactly.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod correlate;
pub mod csvio;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod measure;
pub mod toy;
pub mod train;

pub use error::{LabError, Result};
