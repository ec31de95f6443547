use thiserror::Error;

/// Errors produced by the modelling, simulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("degenerate parameters: {0}")]
    Degenerate(String),

    #[error("simulation diverged at t = {t:.6e} s")]
    Diverged { t: f64 },

    #[error("no {phase} segments in record")]
    NoSegments { phase: String },

    #[error("insufficient cycles: need {needed}, found {found}")]
    InsufficientCycles { needed: usize, found: usize },

    #[error("tracking error never settles inside the {band:.1} A band within {horizon:.3e} s")]
    NeverSettles { band: f64, horizon: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing key `{0}`")]
    MissingKey(String),

    #[error("data shape: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
