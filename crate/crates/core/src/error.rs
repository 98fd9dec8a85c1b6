use thiserror::Error;

/// Errors raised while loading, validating or solving a problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical failure{}: {reason}", node.map(|i| format!(" at node {i}")).unwrap_or_default())]
    Numerical { node: Option<usize>, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numerical(node: impl Into<Option<usize>>, reason: impl Into<String>) -> Self {
        Error::Numerical {
            node: node.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse(_) | Error::Io(_) => 1,
            Error::Validation(_) | Error::Dimension(_) => 2,
            Error::Numerical { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
