use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("latency table has no entry for op descriptor `{0}`")]
    MissingLatencyKey(String),

    #[error("invalid latency table: {0}")]
    InvalidLatencyTable(String),

    #[error("rejection sampling exhausted after {attempts} attempts ({accepted} of {requested} accepted)")]
    RejectionExhausted {
        attempts: u64,
        accepted: usize,
        requested: usize,
    },

    #[error("reward domain error: {0}")]
    RewardDomain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("space too large to enumerate: {cardinality} architectures exceeds the limit of {limit}")]
    TooLarge { cardinality: String, limit: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("policy logits became non-finite at step {0}")]
    NonFinitePolicy(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
