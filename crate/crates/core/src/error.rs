use thiserror::Error;

/// Errors shared across the table, protocol and pipeline layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    She(#[from] crate::she::SheError),
    #[error("input table has no rows")]
    EmptyInput,
    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("dictionary has no entries")]
    EmptyDictionary,
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("cannot reach k-anonymity: {retained} rows remain, k = {k}")]
    Unsatisfiable { retained: usize, k: usize },
    #[error("enumeration space {space} exceeds budget {budget}")]
    ParameterTooLarge { space: String, budget: u64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("row {row}, column {col}: {msg}")]
    Parse { row: usize, col: String, msg: String },
    #[error("unknown category value {value:?} in column {col}")]
    UnknownCategory { col: String, value: String },
    #[error("hierarchy: {0}")]
    Hierarchy(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
