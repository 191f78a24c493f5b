use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A length or dimension does not match what the operation expects.
    #[error("shape error: {0}")]
    Shape(String),

    /// A probability vector is not on the simplex.
    #[error("not a probability vector: {0}")]
    NotSimplex(String),

    /// An invalid configuration value; the first field names the offending key.
    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A stopping time was never filled in.
    #[error("stopping time of group {0} is unset")]
    UnsetStoppingTime(usize),

    #[error("round {round} outside [1, {t_max}]")]
    RoundOutOfRange { round: usize, t_max: usize },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("replay diverged at round {round}: {detail}")]
    Replay { round: usize, detail: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
