use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss {loss} is not supported for {context}")]
    UnsupportedLoss { loss: &'static str, context: String },

    /// The open sign region of one neuron is empty; `certificate` holds the
    /// nonnegative instance weights whose combination proves it.
    #[error("empty basin: neuron {neuron} admits no strictly sign-consistent weight")]
    EmptyBasin { neuron: usize, certificate: Vec<f64> },

    #[error("bracket violation: {0}")]
    Bracket(String),

    #[error("path condition 1 fails at lambda = {lambda}: no scale c <= {c_max:e} lifts the objective to L0 + eps")]
    Condition1 { lambda: f64, c_max: f64 },

    #[error("path condition 2 fails: L(P(W0)) = {l0} is not above L(0) = {l_zero}")]
    Condition2 { l0: f64, l_zero: f64 },

    #[error("path endpoint does not improve: L(P(W1)) = {l1} >= L(P(W0)) = {l0}")]
    NoImprovement { l0: f64, l1: f64 },

    #[error("patterns differ: {0}")]
    PatternMismatch(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
