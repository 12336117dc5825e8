use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty reference buffer; an intra frame must precede inter frames")]
    EmptyReferenceBuffer,
    #[error("truncated stream: {0}")]
    Truncated(String),
    #[error("corrupt stream at frame {frame}: {reason}")]
    Corrupt { frame: usize, reason: String },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("no quality overlap between curves")]
    NoOverlap,
    #[error("intra codec failed: {0}")]
    Intra(String),
    #[error("image decoding failed: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
