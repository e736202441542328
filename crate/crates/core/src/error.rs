use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("input is not valid UTF-8 (byte offset {0})")]
    InvalidEncoding(usize),
    #[error("line {line}: expected {expected} numbers, found {found}")]
    RaggedLine { line: usize, expected: usize, found: usize },
    #[error("line {line}: cannot parse `{token}` as a number")]
    BadNumber { line: usize, token: String },
    #[error("embedding file is empty")]
    EmptyEmbeddings,
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: label must be 0 or 1, found {label}")]
    BadLabel { line: usize, label: i64 },
    #[error("alphabet has no character different from `{0}`")]
    DegenerateAlphabet(char),
    #[error("invalid perturbation policy: {0}")]
    InvalidPolicy(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("epoch {epoch} out of range for {epochs} epochs")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("need at least 3 documents to split, got {0}")]
    TooFewDocuments(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model file: {0}")]
    ModelFormat(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
