use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not skew-symmetric (asymmetry {0:.3e})")]
    NotSkew(f64),

    #[error("matrix is not a rotation (orthogonality defect {orthogonality:.3e}, det {det})")]
    NotRotation { orthogonality: f64, det: f64 },

    #[error("cannot project matrix onto SO(3): {0}")]
    Projection(&'static str),

    #[error("relative rotation angle is at pi, local coordinates undefined")]
    AntipodalRotation,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("all weights are zero")]
    ZeroWeights,

    #[error("weight underflow: every log-weight is -inf or NaN")]
    WeightUnderflow,

    #[error("window {start}..{end} does not fit inside {available} observation increments")]
    WindowOutOfRange { start: usize, end: usize, available: usize },

    #[error("trajectory record is inconsistent: {0}")]
    BadTrajectory(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward pass failed: Quu not positive definite after {0} regularization escalations")]
    BackwardPass(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
