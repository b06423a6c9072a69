use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("event at ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfBounds { x: u32, y: u32, width: u16, height: u16 },

    #[error("polarity must be +1 or -1, got {0}")]
    BadPolarity(i64),

    #[error("stream has no time extent to split into {0} bins")]
    EmptyStream(usize),

    #[error("operation requires a polarity-mode frame volume")]
    NotPolarityMode,

    #[error("negative photon flux {0}")]
    NegativeFlux(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("time must increase: got t={t} after t={last}")]
    NonMonotonicTime { t: u64, last: u64 },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called before a forward pass was recorded")]
    MissingTape,

    #[error("Poisson rate must be positive, got {0}")]
    NonPositiveLambda(f64),

    #[error("stream is not sorted at record {0}")]
    UnsortedStream(usize),

    #[error("bad time-surface spec: {0}")]
    BadSpec(String),

    #[error("thresholds must satisfy theta_pos > 0 > theta_neg")]
    BadThresholds,

    #[error("gain must be positive, got {0}")]
    NonPositiveGain(f64),

    #[error("ROC curve needs at least two points")]
    DegenerateCurve,

    #[error("AUC grid is empty")]
    EmptyGrid,

    #[error("background profile is empty")]
    EmptyProfile,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("bad magic bytes, expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("file truncated: {0}")]
    TruncatedFile(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("type mismatch: {0}")]
    TypeMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
