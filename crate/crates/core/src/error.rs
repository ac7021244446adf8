use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArtifactError {
    #[error("bad magic bytes, expected AIMG1")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid pixel {value} at index {index}")]
    InvalidPixel { index: usize, value: f32 },
    #[error("dimension mismatch: {width}x{height} with {pixels} pixels")]
    DimensionMismatch { width: u32, height: u32, pixels: usize },
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(u8),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("malformed artifact id {0:?}")]
    BadId(String),
    #[error("artifact id {claimed} does not match content hash {actual}")]
    IdMismatch { claimed: String, actual: String },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("unknown artifact {0}")]
    UnknownArtifact(String),
    #[error("storage failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt sidecar for {id}: {message}")]
    CorruptMeta { id: String, message: String },
}
