use std::path::PathBuf;

/// Errors raised across the modelling, sampling and simulation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("invalid simplex: {0}")]
    InvalidSimplex(String),
    #[error("degenerate tail: P(Y >= {cutpoint}) is {value}, logit undefined")]
    DegenerateTail { cutpoint: usize, value: f64 },

    #[error("rejection sampling exhausted after {attempts} attempts")]
    RejectionExhausted { attempts: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("bounds violation: {0}")]
    BoundsViolation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("could not find a finite initial point after {attempts} attempts")]
    InitFailure { attempts: usize },
    #[error("non-finite gradient at a finite log-density point (chain {chain})")]
    NonFiniteGradient { chain: usize },
    #[error("invalid sampler configuration: {0}")]
    InvalidSamplerConfig(String),

    #[error("grid plan has an empty axis: {0}")]
    EmptyPlan(&'static str),
    #[error("insufficient replicates: need at least {needed}, have {have}")]
    InsufficientReplicates { needed: usize, have: usize },
    #[error("replicate {rep} out of range (n_sim = {n_sim})")]
    ReplicateOutOfRange { rep: usize, n_sim: usize },

    #[error("{path}: parse error at row {row}, column {column}: {message}")]
    Parse { path: PathBuf, row: usize, column: String, message: String },
    #[error("{path}: row {row}: {message}")]
    Domain { path: PathBuf, row: usize, message: String },
    #[error("{path}: row {row}: duplicate subject id {subject_id:?}")]
    DuplicateSubject { path: PathBuf, row: usize, subject_id: String },
    #[error("no rows left after removing missing outcomes")]
    EmptyAfterFilter,

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{context}: {source}")]
    Json { context: String, source: serde_json::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
