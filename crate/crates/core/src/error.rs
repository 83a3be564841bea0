use std::path::PathBuf;

/// Errors produced by covdiff.
///
/// Variable indices carried by the variants are 0-based; the rendered
/// messages report them 1-based.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate pair ({}, {}): {reason}", .k + 1, .l + 1)]
    DegeneratePair {
        k: usize,
        l: usize,
        reason: &'static str,
    },

    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue:e} is below -{tol:e}")]
    NotPsd { eigenvalue: f64, tol: f64 },

    #[error("parse error at row {row}{}: {message}", .column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        row: usize,
        column: Option<usize>,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
