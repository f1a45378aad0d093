use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("kernel is singular: factorization failed with jitter up to {attempted_jitter:e}")]
    SingularKernel { attempted_jitter: f64 },

    #[error("eigenvalue iteration did not converge ({0})")]
    NoConvergence(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("invalid sweep: {0}")]
    InvalidSweep(String),

    #[error("allocation of {requested_bytes} bytes exceeds memory cap of {cap_bytes} bytes ({what})")]
    MemoryCap {
        what: String,
        requested_bytes: u64,
        cap_bytes: u64,
    },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data set is empty")]
    EmptySet,

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
