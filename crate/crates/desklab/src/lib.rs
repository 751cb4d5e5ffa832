//! Files, reports and the command line around `desklab-core`.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod packed;
pub mod report;
pub mod runconfig;

pub use desklab_core as core;
pub use error::{Error, Result};
