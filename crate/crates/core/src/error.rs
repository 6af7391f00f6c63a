use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("cheirality violated: {0}")]
    Cheirality(String),
    #[error("parallax {angle_deg:.4} deg below minimum {min_deg:.4} deg")]
    LowParallax { angle_deg: f64, min_deg: f64 },
    #[error("under-constrained: {0}")]
    UnderConstrained(String),
    #[error("insufficient motion: displacement {0:e} too small")]
    InsufficientMotion(f64),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("storage backend: {0}")]
    Backend(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
}
