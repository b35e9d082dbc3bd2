use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("weight {delta} is not admissible: {reason}")]
    Admissibility { delta: f64, reason: String },
    #[error("deficiency coefficients ({a}, {b}) leave the trust region")]
    TrustRegion { a: f64, b: f64 },
    #[error("iteration diverged: contraction ratios {ratios:?}")]
    Divergence { ratios: Vec<f64> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Admissibility { .. } => 3,
            Error::Domain(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
