use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid dialogue {id}: {message}")]
    Validation { id: String, message: String },

    #[error("invalid segmentation for {id}: {message}")]
    InvalidSegmentation { id: String, message: String },

    #[error("binary format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },

    #[error("every position of a masked reduction is masked out")]
    AllMasked,

    #[error("parameter {name}: {message}")]
    Parameter { name: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unmatched dialogue ids: {0:?}")]
    UnmatchedIds(Vec<String>),

    #[error("non-deterministic objective: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("loss became non-finite at step {step}; offending parameter {parameter}")]
    NonFiniteLoss { step: usize, parameter: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
