use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("secret {value} outside the admissible range (|x| <= {bound})")]
    SecretOutOfRange { value: f64, bound: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("both shares belong to the same party")]
    SameOwner,
    #[error("dealer material exhausted: {0}")]
    MaterialExhausted(String),
    #[error("measurement duration too short")]
    DurationTooShort,
    #[error("peer closed the channel")]
    PeerClosed,
    #[error("timed out waiting for peer")]
    Timeout,
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("masked divisor is zero")]
    DivisorMaskedZero,
    #[error("revealed mask product is singular")]
    SingularW,
    #[error("input matrix is singular")]
    SingularInput,
    #[error("random similarity transform is singular")]
    SingularP,
    #[error("eigensolver did not converge")]
    EigensolverNoConverge,
    #[error("spatial dimension {0} is odd at a pooling layer")]
    OddSpatialDim(usize),
    #[error("session config mismatch between servers")]
    ConfigMismatch,
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid file format: {0}")]
    Format(String),
    #[error("equivalence failure: {0}")]
    Equivalence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigMismatch => 2,
            Error::MaterialExhausted(_) => 4,
            Error::Equivalence(_) => 5,
            _ => 3,
        }
    }
}
