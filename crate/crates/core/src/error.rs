use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kinetic parameters: {0}")]
    InvalidParams(String),

    #[error("invalid curve: {0}")]
    InvalidCurve(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate residue roots (alpha = {alpha}, beta = {beta}) and confluent form disabled")]
    DegenerateRoots { alpha: f64, beta: f64 },

    #[error("curve is not sampled on a uniform grid")]
    NonUniformGrid,

    #[error("requested time {time} s is not covered by the input grid")]
    GridCoverage { time: f64 },

    #[error("curves are not sampled on a common grid")]
    GridMismatch,

    #[error("integration step {step} s too large for rate {rate} 1/s (h*rate must be <= 0.1)")]
    StepSize { step: f64, rate: f64 },

    #[error("no baseline samples supplied")]
    EmptyBaseline,

    #[error("baseline signal is zero")]
    ZeroBaseline,

    #[error("signal {signal} outside attainable range [{min}, {max}]")]
    SignalOutOfRange { signal: f64, min: f64, max: f64 },

    #[error("root is not bracketed on [{lo}, {hi}] s")]
    NonBracketing { lo: f64, hi: f64 },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("tissue curve carries no signal (all zero)")]
    DegenerateData,

    #[error("no start converged within {max_iter} iterations")]
    NoConvergence { max_iter: usize },

    #[error("log target is -inf at the initial state")]
    InvalidInit,

    #[error("mask is empty")]
    EmptyMask,

    #[error("singular value decomposition failed: {0}")]
    Svd(String),

    #[error("expected 2 large high-variance components, found {found}")]
    ComponentCount { found: usize },

    #[error("RV insertion points coincide")]
    CoincidentRvPoints,

    #[error("territory {territory} has {found} segments, need at least {needed}")]
    InsufficientSegments {
        territory: String,
        found: usize,
        needed: usize,
    },

    #[error("ROC analysis needs both classes present")]
    SingleClass,

    #[error("malformed file at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidParams(_)
            | Error::InvalidCurve(_)
            | Error::InvalidArgument(_)
            | Error::NonUniformGrid
            | Error::GridCoverage { .. }
            | Error::GridMismatch
            | Error::EmptyBaseline
            | Error::EmptyMask
            | Error::CoincidentRvPoints
            | Error::Format { .. }
            | Error::Config(_)
            | Error::Json(_) => true,
            Error::Sample { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn at_sample(index: usize, source: Error) -> Self {
        Error::Sample {
            index,
            source: Box::new(source),
        }
    }
}
