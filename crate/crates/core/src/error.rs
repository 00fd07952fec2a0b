use thiserror::Error;

/// Errors raised anywhere in the synthesis and verification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("verification infeasible: {0}")]
    VerificationInfeasible(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported schema `{found}`, expected `{expected}`")]
    Schema { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
