use alloc::string::String;

/// Errors raised anywhere in the core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("geohash parse error at position {position}: {reason}")]
    Geohash { position: usize, reason: &'static str },
    #[error("data quality: {malformed} of {total} records malformed")]
    DataQuality { malformed: usize, total: usize },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("sample {index}: {source}")]
    InSample {
        index: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Attaches the index of the batch sample that failed.
    pub fn in_sample(self, index: usize) -> Self {
        Error::InSample { index, source: alloc::boxed::Box::new(self) }
    }
}
