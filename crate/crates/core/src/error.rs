use thiserror::Error;

/// What exactly is wrong with a record file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion,
    Truncated,
    BadLabel,
    BadLeadCount,
    BadText,
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FormatErrorKind::BadMagic => "bad magic",
            FormatErrorKind::UnsupportedVersion => "unsupported version",
            FormatErrorKind::Truncated => "truncated file",
            FormatErrorKind::BadLabel => "unknown label byte",
            FormatErrorKind::BadLeadCount => "unexpected lead count",
            FormatErrorKind::BadText => "invalid UTF-8 text",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: config values, CLI arguments, malformed requests.
    /// Maps to exit code 1.
    #[error("validation error: {0}")]
    Validation(String),

    /// Data that fails a runtime precondition (non-finite samples,
    /// degenerate label sets, empty groups).
    #[error("data error: {0}")]
    Data(String),

    /// A record with fewer than the required beats; callers skip and log.
    #[error("insufficient beats in {record_id}: found {found}, need {need}")]
    InsufficientBeats {
        record_id: String,
        found: usize,
        need: usize,
    },

    /// Record or checkpoint file violates its binary format.
    #[error("format error in {path}: {kind}")]
    Format { path: String, kind: FormatErrorKind },

    /// Text-encoder backend failure (e.g. missing precomputed embedding).
    #[error("text encoder backend '{backend}': {detail}")]
    Encoder { backend: String, detail: String },

    /// Training diverged; carries the offending batch for diagnosis.
    #[error("non-finite loss at epoch {epoch}, step {step}; batch records: {batch_ids:?}")]
    NonFinite {
        epoch: usize,
        step: usize,
        batch_ids: Vec<String>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// True for errors caused by bad user input rather than runtime failure;
    /// the CLI maps these to exit code 1 and everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_))
    }
}
