//! Recording containers, clip archives, weight files and the `eegraph`
//! command-line pipeline on top of [`eegraph_core`].

pub mod archive;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod overlay;
pub mod pipeline;

pub use error::{Error, Result};
