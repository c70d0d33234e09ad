//! Graph-based spatiotemporal modeling of multichannel EEG.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numeric piece of
//! the pipeline: recording synthesis and annotation masks, spectral clip
//! features, distance and correlation graphs, a small reverse-mode tensor
//! engine, diffusion/Chebyshev convolutional GRUs, training procedures,
//! evaluation metrics and occlusion-based localization scores.
//!
//! File formats, resampling and the command line live in the `eegraph`
//! companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod evaluation;
pub mod fft;
pub mod graph;
pub mod ingest;
pub mod interpret;
pub mod linalg;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
