use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range input data.
    #[error("invalid input: {0}")]
    Input(String),
    /// Components that do not fit together (vocab mismatch, stale cache, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// The observed prefix has zero probability under the model.
    #[error("degenerate evidence: prefix has zero probability")]
    DegenerateEvidence,
    /// Every candidate token received zero combined mass.
    #[error("contradiction at step {step}: combined distribution has zero mass")]
    Contradiction { step: usize },
    /// A lookup table does not cover the queried prefix.
    #[error("table source has no entry for prefix {0:?}")]
    Coverage(Vec<usize>),
    /// Remote next-token server failure.
    #[error("remote source: {0}")]
    Remote(String),
    /// Brute-force enumeration would exceed its budget.
    #[error("enumeration budget exceeded: need {needed} terms, budget {budget}")]
    Budget { needed: u128, budget: u128 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::DegenerateEvidence => "degenerate_evidence",
            Error::Contradiction { .. } => "contradiction",
            Error::Coverage(_) => "coverage",
            Error::Remote(_) => "remote",
            Error::Budget { .. } => "budget",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
