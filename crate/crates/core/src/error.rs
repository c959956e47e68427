use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report. The variant decides the CLI exit
/// code, the FFI status code and the HTTP status the service answers with.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("vocabulary `{vocab_id}`: {message}")]
    Vocabulary { vocab_id: String, message: String },

    /// The selected gateway or backend cannot perform the request.
    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no synonym window: caption has {caption_words} word(s), attribute needs {window_len}")]
    NoMatch {
        caption_words: usize,
        window_len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A model adapter failed (transport, protocol or model error).
    #[error("gateway error: {0}")]
    Gateway(String),

    #[error("backend `{backend}` failed on job {job}: {message}")]
    Backend {
        backend: String,
        job: String,
        message: String,
    },

    #[error("edit queue is full ({depth} pending)")]
    Busy { depth: usize },

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn vocabulary(vocab_id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Vocabulary {
            vocab_id: vocab_id.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable kind, used in JSON error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Vocabulary { .. } => "vocabulary",
            Error::Capability(_) => "capability",
            Error::Numeric(_) => "numeric",
            Error::NoMatch { .. } => "no_match",
            Error::Config(_) => "config",
            Error::Gateway(_) => "gateway",
            Error::Backend { .. } => "backend",
            Error::Busy { .. } => "busy",
            Error::NotFound(_) => "not_found",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
