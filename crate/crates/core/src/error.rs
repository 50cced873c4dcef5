//! Error type shared across the crate.
//!
//! The CLI maps variants onto exit codes, so classification matters:
//! configuration problems, data problems and numerical divergence are
//! kept distinct.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("channel '{0}' is constant; percentile normalization is undefined")]
    ConstantChannel(String),

    #[error("unknown channel '{0}'")]
    UnknownChannel(String),

    #[error("feature distances collapsed to zero; homothety scale is undefined")]
    FeatureCollapse,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
