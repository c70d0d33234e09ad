use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("window [{start}, {end}) s lies outside the recording (duration {duration} s)")]
    WindowOutOfBounds { start: f64, end: f64, duration: f64 },
    #[error("node {0} has zero degree")]
    IsolatedNode(usize),
    #[error("graph must be undirected for this operation")]
    DirectedGraph,
    #[error("feature {index} has zero standard deviation")]
    DegenerateStats { index: usize },
    #[error("both classes must be present")]
    SingleClass,
    #[error("class index {index} out of range for {n_classes} classes")]
    ClassOutOfRange { index: usize, n_classes: usize },
    #[error("backward called on a tensor that does not require gradients")]
    Detached,
    #[error("no training data: {0}")]
    NoData(String),
}

pub type Result<T> = core::result::Result<T, Error>;
