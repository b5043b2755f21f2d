//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch. `op` names the operation, `detail` names
    /// the offending dimension.
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A forward op produced NaN or Inf on finite inputs.
    #[error("non-finite value produced by op '{op}'")]
    NonFinite { op: String },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    /// `backward` was called twice on the same tape without a reset.
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardConsumed,

    /// The loss does not depend on any tensor that requires gradients.
    #[error("backward on a detached graph: loss reaches no differentiable leaf")]
    DetachedGraph,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// PPM header could not be parsed.
    #[error("malformed ppm header: {0}")]
    PpmHeader(String),

    /// PPM pixel payload shorter than the header promises.
    #[error("truncated ppm payload: expected {expected} bytes, got {got}")]
    PpmTruncated { expected: usize, got: usize },

    /// Only maxval 255 is supported.
    #[error("unsupported ppm maxval {0} (only 255 is supported)")]
    PpmUnsupportedMaxval(u32),

    #[error("bad checkpoint magic {found:?}")]
    CkptBadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CkptVersion { found: u32, expected: u32 },

    #[error("checkpoint config digest mismatch: file {found:#018x}, expected {expected:#018x}")]
    CkptDigestMismatch { found: u64, expected: u64 },

    #[error("truncated checkpoint: {0}")]
    CkptTruncated(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
