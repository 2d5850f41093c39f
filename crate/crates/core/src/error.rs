use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero dimension in {0:?}")]
    ZeroDimension(Vec<usize>),

    #[error("odd channel count {0}; channel chunking needs an even count")]
    OddChannels(usize),

    #[error("region {origin:?}+{shape:?} does not fit in {dims:?}")]
    OutOfBounds {
        origin: [usize; 3],
        shape: [usize; 3],
        dims: [usize; 3],
    },

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("truncated stream: {0}")]
    Truncated(String),

    #[error("non-finite value at step {step} in {context}")]
    NonFinite { step: usize, context: String },

    #[error("gradcheck: non-finite forward value when perturbing input {input} coordinate {index}")]
    GradcheckNonFinite { input: usize, index: usize },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing saved state: {0}")]
    MissingSaved(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
