use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes. Each maps onto a distinct CLI exit code, see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("regression design is rank deficient at step {step} (pivot {pivot:.3e}); increase ridge or paths")]
    RankDeficient { step: usize, pivot: f64 },

    #[error("too few paths ({paths}) for a basis of dimension {basis}")]
    TooFewPaths { paths: usize, basis: usize },

    #[error("non-finite value at step {step}, path {path}: {hint}")]
    NonFinite {
        step: usize,
        path: usize,
        hint: String,
    },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("explicit reaction term destabilizes the step at t={time}: |df/du|*dt = {factor:.3} > 2; reduce dt")]
    Unstable { time: f64, factor: f64 },

    #[error("insufficient coverage: {0}")]
    Coverage(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 = schema/validation, 3 = numerical, 4 = i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config(_) | Error::Shape(_) => 2,
            Error::RankDeficient { .. }
            | Error::TooFewPaths { .. }
            | Error::NonFinite { .. }
            | Error::LinearSolve(_)
            | Error::Unstable { .. }
            | Error::Coverage(_)
            | Error::Numerical(_) => 3,
            Error::Io { .. } | Error::Format(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::TooFewPaths { .. } => "too_few_paths",
            Error::NonFinite { .. } => "non_finite",
            Error::LinearSolve(_) => "linear_solve",
            Error::Unstable { .. } => "unstable",
            Error::Coverage(_) => "coverage",
            Error::Numerical(_) => "numerical",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
