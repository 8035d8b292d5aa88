use std::io;

use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("unknown modality `{0}`")]
    UnknownModality(String),

    #[error("model/registry incompatibility: {0}")]
    Incompatible(String),

    #[error("arity error: {0}")]
    Arity(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
