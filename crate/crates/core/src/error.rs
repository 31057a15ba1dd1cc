use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("timestamps decrease at event {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error("event {index} at ({x}, {y}) lies outside the sensor geometry")]
    OutOfBounds { index: usize, x: u32, y: u32 },
    #[error("event stream is empty")]
    EmptyStream,
    #[error("invalid sensor geometry {width}x{height}")]
    InvalidGeometry { width: u32, height: u32 },
    #[error("invalid polarity value {value} in record at byte offset {offset}")]
    InvalidPolarity { offset: usize, value: u8 },

    #[error("truncated record at byte offset {offset} ({remaining} trailing bytes)")]
    TruncatedRecord { offset: usize, remaining: usize },
    #[error("truncated header: need {needed} bytes, have {available}")]
    TruncatedHeader { needed: usize, available: usize },
    #[error("malformed header at byte offset {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {0}")]
    UnsupportedVersion(String),
    #[error("header announces {expected} records but {found} are present")]
    CountMismatch { expected: u64, found: u64 },

    #[error("cannot cut {events} events into {slices} non-empty slices")]
    TooFewEvents { events: usize, slices: usize },
    #[error("slice boundaries cover {covered} events but the stream has {available}")]
    SliceSpecMismatch { covered: usize, available: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch normalization needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint config digest {checkpoint} does not match config digest {config}")]
    ConfigDigestMismatch { checkpoint: String, config: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through file context.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_data_error(&self) -> bool {
        !matches!(
            self.root(),
            Error::Io(_) | Error::InvalidConfig(_) | Error::ConfigDigestMismatch { .. }
        )
    }
}
