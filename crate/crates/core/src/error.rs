use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("sequence too long: {len} tokens exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("target unreachable within horizon {horizon}: needs {needed} steps")]
    Horizon { horizon: usize, needed: usize },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss at batch episode {episode}: {detail}")]
    NonFinite { episode: usize, detail: String },

    #[error("config error in `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, used as the CLI exit line prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "E_DIMENSION",
            Error::Index(_) => "E_INDEX",
            Error::Contract(_) => "E_CONTRACT",
            Error::Length { .. } => "E_LENGTH",
            Error::Horizon { .. } => "E_HORIZON",
            Error::Generation(_) => "E_GENERATION",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::Config { .. } => "E_CONFIG",
            Error::Format(_) => "E_FORMAT",
            Error::Io(_) => "E_IO",
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
