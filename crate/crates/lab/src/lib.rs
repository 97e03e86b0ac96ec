//! File formats, INI experiment configs and the experiment runner behind
//! the `cocos-lab` binary.

pub mod config;
pub mod error;
pub mod experiment;
pub mod format;

pub use error::{LabError, Result};
