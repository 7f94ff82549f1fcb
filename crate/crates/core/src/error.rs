use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("keep-alive violated: layer {layer} has no alive channels")]
    KeepAlive { layer: usize },

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("accumulator overflow in stage {stage}")]
    AccumulatorOverflow { stage: usize },

    #[error("requantization scale {ratio:e} cannot be encoded as multiplier+shift")]
    ScaleEncoding { ratio: f64 },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("layer `{layer}` cannot be tiled: {reason}")]
    Untileable { layer: String, reason: String },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("schema version {found} not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad inputs rather than by a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::InvalidArgument(_)
                | Error::InvalidArch(_)
                | Error::Format(_)
                | Error::SchemaVersion { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
