//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong, from tensor shape checks to file I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operands disagree on shape (wrong rank, wrong extent, wrong element
    /// count for a reshape, ...).
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Channel counts of an input and a kernel disagree.
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    /// A convolution kernel's receptive field exceeds what same-padding can
    /// support on the given input.
    #[error("kernel too large: {0}")]
    KernelTooLarge(String),

    /// `backward` was asked to differentiate a non-scalar tensor.
    #[error("backward root must be a scalar, got {len} elements")]
    NonScalarRoot { len: usize },

    /// A tensor was used with a tape it was not recorded on.
    #[error("tensor is not on this tape: {0}")]
    NotOnTape(String),

    /// A structural parameter is invalid (bad bin count, reduction that does
    /// not divide the channel count, empty extent, ...).
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Run configuration failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// A training stage needs a checkpoint that has not been produced yet.
    #[error("missing {stage} checkpoint at {path}: run the {stage} stage first")]
    MissingCheckpoint { stage: String, path: String },

    /// The training loss became non-finite.
    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },

    /// Scene generation could not place the requested boxes without overlap.
    #[error("box placement rejection budget exhausted: placed {placed} of {requested}")]
    RejectionBudget { placed: usize, requested: usize },

    /// Container file does not start with the expected magic bytes.
    #[error("bad container magic")]
    BadMagic,

    /// Container version is not supported.
    #[error("unsupported container version {0}")]
    BadVersion(u16),

    /// Stored CRC32 does not match the payload.
    #[error("checksum mismatch in record {name}")]
    ChecksumMismatch { name: String },

    /// Container ended mid-record or carries trailing bytes.
    #[error("malformed container: {0}")]
    BadContainer(String),

    /// A named record is absent from a container.
    #[error("missing record {0}")]
    MissingRecord(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
