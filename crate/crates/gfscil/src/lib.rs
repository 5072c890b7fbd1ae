//! Dataset files, checkpoints, run configuration, reports, the experiment
//! driver and the gradient-check harness behind the `gfscil` binary.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod driver;
pub mod fsutil;
pub mod gradcheck;
pub mod report;
pub mod variants;
