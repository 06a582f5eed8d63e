use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI and the C API to pick exit/status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Infeasible,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: file is empty")]
    EmptyFile { path: PathBuf },

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: row {row}: non-binary treatment value `{value}` in column `{column}`")]
    NonBinaryTreatment {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("{path}: row {row}: non-numeric cell `{value}` in column `{column}`")]
    NonNumericCell {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("{path}: row {row}: missing value in column `{column}`")]
    MissingValue {
        path: PathBuf,
        row: usize,
        column: String,
    },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no convergence after {iterations} iterations ({what}); last norm {norm:.3e}")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        norm: f64,
    },

    #[error("separation detected while fitting {what}: {detail}")]
    Separation { what: &'static str, detail: String },

    #[error("{what} has no solution: {detail}")]
    NoRoot { what: &'static str, detail: String },

    #[error("singular system while fitting {0}")]
    Singular(&'static str),

    #[error("rank-deficient design: columns {columns:?} are collinear")]
    RankDeficient { columns: Vec<String> },

    #[error("balance constraints infeasible; most violated moment is `{feature}` (imbalance {imbalance:.4e}, tolerance {tolerance:.4e})")]
    Infeasible {
        feature: String,
        imbalance: f64,
        tolerance: f64,
    },

    #[error("inner solver failed at outer iteration {outer_iteration}: {reason}")]
    InnerSolver {
        outer_iteration: usize,
        reason: String,
    },

    #[error("{0}")]
    Selection(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::EmptyFile { .. }
            | Error::MissingColumn { .. }
            | Error::NonBinaryTreatment { .. }
            | Error::NonNumericCell { .. }
            | Error::MissingValue { .. }
            | Error::InvalidSample(_)
            | Error::DimensionMismatch { .. }
            | Error::InvalidConfig(_)
            | Error::Json(_) => ErrorCategory::Input,
            Error::Infeasible { .. } | Error::NoRoot { .. } => ErrorCategory::Infeasible,
            Error::NoConvergence { .. }
            | Error::Separation { .. }
            | Error::Singular(_)
            | Error::RankDeficient { .. }
            | Error::InnerSolver { .. }
            | Error::Selection(_) => ErrorCategory::Numerical,
            Error::Io { .. } | Error::Csv { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
