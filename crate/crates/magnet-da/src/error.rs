use thiserror::Error;

/// Errors raised by tensor ops, losses, data handling and training.
#[derive(Error, Debug)]
pub enum MagnetError {
    /// Shape or dimension disagreement between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A scalar argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A caller violated an operation's contract (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Inconsistent or unusable configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Source and target datasets disagree on the class vocabulary.
    #[error("class vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    /// A serialized file has the wrong magic bytes.
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: &'static str },

    /// A serialized file has an unsupported format version.
    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },

    /// A serialized file ended before its declared contents.
    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MagnetError>;
