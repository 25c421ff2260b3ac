use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("{file}:{line}: duplicate annotation for cell ({verb}, {object})")]
    DuplicateAnnotation {
        file: String,
        line: usize,
        verb: usize,
        object: usize,
    },

    #[error("{what} id {id} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        id: usize,
        limit: usize,
    },

    #[error("prevalence undefined: the evaluation pool is empty")]
    UndefinedPrevalence,

    #[error("average precision undefined: no positive items")]
    UndefinedAp,

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("instance {index} is labeled ({verb}, {object}) which is not a known concept")]
    IllegalInstance {
        index: usize,
        verb: usize,
        object: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("probability {value} outside [0, 1] at row {row}, verb {verb}")]
    ProbabilityRange { row: usize, verb: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(
        "non-finite loss at iteration {iteration}: hoi={hoi_loss}, compositional={compositional_loss}, self-training={self_training_loss}"
    )]
    NumericalAbort {
        iteration: usize,
        hoi_loss: f64,
        compositional_loss: f64,
        self_training_loss: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code for the command-line surface: 2 for data problems,
    /// 3 for numerical aborts. Usage errors (1) are raised by argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalAbort { .. } | Error::NonFinite(_) => 3,
            Error::InvalidConfig(_) => 1,
            _ => 2,
        }
    }
}
