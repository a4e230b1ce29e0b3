use thiserror::Error;

/// Errors produced anywhere in the compression toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("size mismatch: expected {expected} {unit}, got {actual}")]
    Size {
        expected: u64,
        actual: u64,
        unit: &'static str,
    },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ratio undefined: {0}")]
    UndefinedRatio(String),
    #[error("corrupt data in {section}: {detail}")]
    Corrupt {
        section: &'static str,
        detail: String,
    },
    #[error("unsupported container version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("tuning failed: {0}")]
    Tuning(String),
    #[error("synthetic generation failed: {0}")]
    Generation(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("chunk {chunk}: {source}")]
    Chunk {
        chunk: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn corrupt(section: &'static str, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            section,
            detail: detail.into(),
        }
    }

    /// Strips chunk context so callers can match on the underlying kind.
    pub fn root(&self) -> &Error {
        match self {
            Error::Chunk { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by damaged or truncated encoded data.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self.root(),
            Error::Corrupt { .. } | Error::UnsupportedVersion { .. }
        )
    }
}
