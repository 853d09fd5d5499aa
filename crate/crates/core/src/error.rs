use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("class {0} has no samples")]
    EmptyClass(u32),
    #[error("class id {0} already present in prototype matrix")]
    DuplicateClassId(u32),
    #[error("class id {0} assigned to more than one session")]
    OverlappingClasses(u32),
    #[error("protocol needs {needed} classes but dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("training diverged: loss is not finite at step {step}")]
    Divergence { step: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
