use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so that the command-line front end can map them
/// onto its exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric fault in `{op}`: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("state error: {0}")]
    State(String),

    #[error("unknown prompt token `{0}`")]
    UnknownToken(String),

    #[error("non-deterministic evaluation: {0}")]
    NonDeterministic(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 config, 3 numeric, 4 artifact/state.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
            Error::Shape { .. } | Error::Numeric { .. } | Error::NonDeterministic(_) => 3,
            Error::Artifact(_) | Error::State(_) | Error::UnknownToken(_) | Error::Io(_) => 4,
        }
    }
}
