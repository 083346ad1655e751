use std::fmt;

use thiserror::Error;

/// Which sub-population a failure belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Component {
    /// The frame-covered portion.
    U1,
    /// The portion outside the sampling frame.
    U2,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::U1 => f.write_str("U1"),
            Component::U2 => f.write_str("U2"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("pattern space over {n} sites exceeds the enumeration limit of {max}")]
    PatternSpaceTooLarge { n: usize, max: usize },

    #[error("invalid pattern: {0}")]
    InvalidPattern(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("pattern {pattern} has the own-site bit of site {site} set")]
    ScopeViolation { site: usize, pattern: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("outside the likelihood domain: {0}")]
    Domain(String),

    #[error("likelihood is not finite: {0}")]
    NonFiniteLikelihood(String),

    #[error("parameters are not identifiable: {0}")]
    Unidentifiable(String),

    #[error("degenerate denominator {0:e} in the closed-form population estimate")]
    DegenerateDenominator(f64),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("alternating solver failed to contract after {sweeps} sweeps (last step {last_step:e})")]
    OscillationDetected { sweeps: usize, last_step: f64 },

    #[error("matrix is numerically singular (condition number {condition:e})")]
    SingularMatrix { condition: f64 },

    #[error("insufficient data: {have} effective observations, need at least {need}")]
    InsufficientData { have: u64, need: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{component}: {source}")]
    Component {
        component: Component,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable short name of the failure, looking through component labels.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::PatternSpaceTooLarge { .. } => "PatternSpaceTooLarge",
            Error::InvalidPattern(_) => "InvalidPattern",
            Error::Parse(_) => "Parse",
            Error::Io(_) => "Io",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ScopeViolation { .. } => "ScopeViolation",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::Domain(_) => "Domain",
            Error::NonFiniteLikelihood(_) => "NonFiniteLikelihood",
            Error::Unidentifiable(_) => "Unidentifiable",
            Error::DegenerateDenominator(_) => "DegenerateDenominator",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::OscillationDetected { .. } => "OscillationDetected",
            Error::SingularMatrix { .. } => "SingularMatrix",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::Config(_) => "Config",
            Error::Component { source, .. } => source.kind(),
        }
    }

    pub(crate) fn in_component(self, component: Component) -> Self {
        Error::Component {
            component,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
