use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no capacity estimate for edge {0}: too few observations and no fallback")]
    MissingCapacity(String),

    #[error("no positive speed observation for edge {0}")]
    MissingSpeed(String),

    #[error("invalid O-D pair: {0}")]
    InvalidPair(String),

    #[error("inconsistent data: {0}")]
    Inconsistency(String),

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("degenerate community network: {0}")]
    DegenerateNetwork(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty report: {0}")]
    EmptyReport(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
