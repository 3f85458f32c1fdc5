use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid probability vector: {0}")]
    Probability(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("state error: {0}")]
    State(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("divergence: non-finite loss at batch {batch}")]
    Divergence { batch: usize },

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("parse error for key `{key}`: {detail}")]
    Parse { key: String, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index {
            op,
            detail: detail.into(),
        }
    }
}
