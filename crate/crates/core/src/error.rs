use thiserror::Error;

/// Errors raised by the controllers, the estimators and the scenario runner.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input outside the domain of an operation (non-finite values,
    /// mismatched lengths, out-of-range indices).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates its invariant.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A factorization or inversion failed.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl Error {
    /// Prefixes the field of a configuration error with `scope.`.
    pub(crate) fn scoped(self, scope: &str) -> Self {
        match self {
            Error::Config { field, reason } => Error::Config {
                field: format!("{scope}.{field}"),
                reason,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
