//! File formats, checkpoints, run configuration and the commands of the
//! `uovn` binary.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod netpbm;
pub mod run;
pub mod uovt;

pub use error::{Error, Result};
