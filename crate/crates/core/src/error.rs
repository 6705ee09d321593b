use thiserror::Error;

/// Errors raised by the library and the experiment driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("transition matrix is reducible")]
    ReducibleChain,

    #[error("column {column} of the transition matrix sums to {sum}, expected 1")]
    NonStochastic { column: usize, sum: f64 },

    #[error("column {0} of the unconstrained transition matrix is entirely zero")]
    ZeroColumn(usize),

    #[error("propagated message vanished at t={0}: observation impossible under every state")]
    DegenerateLikelihood(usize),

    #[error("invalid subchain length L={length} for a series of length T={series}")]
    InvalidLength { length: usize, series: usize },

    #[error("no gap-separated subset of {requested} subchains found after {attempts} attempts")]
    InfeasibleGap { requested: usize, attempts: usize },

    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error("quota {quota} exceeds the size {size} of cluster {cluster}")]
    QuotaExceedsCluster {
        cluster: usize,
        quota: usize,
        size: usize,
    },

    #[error("requested {clusters} clusters from {points} points")]
    TooManyClusters { clusters: usize, points: usize },

    #[error("non-finite gradient component at index {0}")]
    NonFiniteGradient(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("observation series is empty")]
    EmptySeries,

    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
