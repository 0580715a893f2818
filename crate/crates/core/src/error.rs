use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported bit depth: {0} bits per sample")]
    UnsupportedBitDepth(u8),

    #[error("unsupported color type: {0}")]
    UnsupportedColorType(String),

    #[error("corrupt image stream: {0}")]
    CorruptImage(String),

    #[error("non-binary mask: value {value} at ({x}, {y})")]
    NonBinaryMask { x: usize, y: usize, value: u8 },

    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint CRC mismatch")]
    Crc,

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("checkpoint fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    Fingerprint { expected: u64, found: u64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
