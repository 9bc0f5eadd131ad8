use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// Strips iteration context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
