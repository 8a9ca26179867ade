use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: NodeId, op: &'static str },

    #[error("input node {0} is not bound")]
    UnboundInput(NodeId),

    #[error("node {0} is not an input")]
    NotAnInput(NodeId),

    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: NodeId, shape: Vec<usize> },

    #[error("forward values are stale; run forward before backward")]
    StaleForward,

    #[error("stop-gradient wiring violation: {0}")]
    Wiring(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
