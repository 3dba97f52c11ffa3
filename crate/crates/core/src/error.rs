use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Batch-norm channel with zero scale has no binarization threshold.
    #[error("degenerate channel {channel}: gamma is zero")]
    DegenerateChannel { channel: usize },

    #[error("latency profile has no entry for layer `{0}`")]
    MissingLayer(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    /// Short machine-readable tag, used by the CLI's structured errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::InvalidParam(_) => "invalid_param",
            Error::DegenerateChannel { .. } => "degenerate_channel",
            Error::MissingLayer(_) => "profile",
            Error::Dataset(_) => "dataset",
            Error::Format(e) => e.kind(),
            Error::Io(_) => "io",
        }
    }
}

/// Load-time failures of the `.cpnt` model container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected \"CPNT\"")]
    BadMagic,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("file truncated")]
    Truncated,

    #[error("shape chain broken at layer `{layer}`: {detail}")]
    ShapeChain { layer: String, detail: String },

    #[error("malformed model: {0}")]
    Malformed(String),
}

impl FormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::BadMagic => "bad_magic",
            FormatError::UnsupportedVersion(_) => "unsupported_version",
            FormatError::Checksum { .. } => "checksum",
            FormatError::Truncated => "truncated",
            FormatError::ShapeChain { .. } => "shape_chain",
            FormatError::Malformed(_) => "malformed",
        }
    }
}
