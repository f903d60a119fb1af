use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// The input table is missing a required column.
    #[error("schema error: missing required column `{0}`")]
    MissingColumn(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// K-means was asked to split values that are all identical.
    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("data integrity error: {0}")]
    DataIntegrity(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
