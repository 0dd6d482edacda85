use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value out of domain in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("malformed {format} data at byte {offset}: {detail}")]
    Format {
        format: &'static str,
        offset: u64,
        detail: String,
    },

    #[error("unsupported {format} variant: {detail}")]
    Unsupported { format: &'static str, detail: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
