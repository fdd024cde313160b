use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants map onto the CLI exit codes: `InvalidArgument` is a usage
/// problem, `Data`/`Schema`/`Io`/`Json` are data problems and `Numeric` is a
/// numeric failure (non-finite loss or gradient).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Data(_) => "data",
            Error::Schema(_) => "schema",
            Error::Numeric(_) => "numeric",
            Error::Training(_) => "training",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
