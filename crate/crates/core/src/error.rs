use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty support: every entry of the distribution is -inf")]
    EmptySupport,

    #[error("empty support after processing at step {step}")]
    EmptySupportAfterProcessing { step: usize },

    #[error("distribution has length {got}, vocabulary has {expected} tokens")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("closed hypothesis: prefix already ends with EOS")]
    ClosedHypothesis,

    #[error("load error: {0}")]
    Load(String),

    #[error("enumeration refused: output space exceeds the cap of {cap} sequences")]
    EnumerationCap { cap: usize },

    #[error("constraint dead end: no live hypothesis has an allowed continuation")]
    ConstraintDeadEnd,

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("transport error talking to {endpoint} after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("remote error: {0}")]
    Remote(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
