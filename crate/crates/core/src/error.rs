use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("reconstruction failed: {reason}")]
    Reconstruction { reason: String, partial_bins: Vec<[u32; 9]> },

    #[error("generation failed: {reason}")]
    Generation { reason: String, tokens: Vec<f32>, latent_dim: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// True for errors caused by bad input rather than numerics or I/O.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Validation(_) | Error::Degenerate(_) | Error::Format(_))
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Reconstruction { .. } | Error::Generation { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
