use std::path::PathBuf;

/// Error type shared by all modules of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("{context}: rank deficient")]
    RankDeficient { context: String },

    #[error("{context}: condition number {cond:.3e} exceeds cap {cap:.3e}")]
    IllConditioned { context: String, cond: f64, cap: f64 },

    #[error("{context}: value {value} outside [{lo}, {hi}]")]
    OutOfRange {
        context: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("numerical failure in {context}: {message}")]
    Numerical { context: String, message: String },

    #[error("aperture mask is empty")]
    EmptyMask,

    #[error("unknown estimator `{0}` (known: {1})")]
    UnknownEstimator(String, String),

    #[error("run artifact error in {path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("at iteration {k}: {source}")]
    AtIteration {
        k: usize,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Runtime,
    Numerical,
}

impl std::fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Runtime => "runtime",
            ErrorCategory::Numerical => "numerical",
        };
        f.write_str(s)
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config { .. } | Error::UnknownEstimator(..) => ErrorCategory::Config,
            Error::RankDeficient { .. }
            | Error::IllConditioned { .. }
            | Error::Numerical { .. } => ErrorCategory::Numerical,
            Error::AtIteration { source, .. } => source.category(),
            _ => ErrorCategory::Runtime,
        }
    }

    /// Tags a component failure with the loop iteration it happened in.
    pub fn with_iteration(self, k: usize) -> Self {
        Error::AtIteration {
            k,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
