use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("history exceeds codec capacity (t = {t}, max_len = {max_len})")]
    HistoryTooLong { t: usize, max_len: usize },

    #[error("codec mismatch: {0}")]
    CodecMismatch(String),

    #[error("horizon too long: tau = {tau} but shortest trajectory has length {min_len}")]
    HorizonTooLong { tau: usize, min_len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("feature width mismatch: model expects {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("singular system: regularize or drop collinear features")]
    Singular,

    #[error(
        "optimizer did not converge within {iterations} iterations (gradient norm {grad_norm:.3e})"
    )]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("intervention path unobserved: no training row follows {path:?}")]
    PathUnobserved { path: Vec<usize> },

    #[error("no training rows with A = {treatment} at response level t+{level}")]
    EmptyLevel { level: usize, treatment: usize },

    #[error("single class present in propensity training data")]
    SingleClass,

    #[error("too few trajectories for sample splitting: n = {n}, need at least {needed}")]
    TooFewTrajectories { n: usize, needed: usize },

    #[error("first-period arms coincide; RA pseudo-outcome ill-posed")]
    ArmsCoincide,

    #[error("missing nuisance: {0}")]
    MissingNuisance(String),

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error under any context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
