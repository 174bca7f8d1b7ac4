use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The CLI maps these onto exit codes through [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-finite value at row {row}, column `{col}`")]
    NonFiniteValue { row: usize, col: String },
    #[error("measurement times not strictly increasing for id `{0}`")]
    NonIncreasingTimes(String),
    #[error("too few rows: have {have}, need at least {need}")]
    TooFewRows { have: usize, need: usize },
    #[error("period length must be positive")]
    ZeroPeriod,
    #[error("denominator must be positive, got {0}")]
    NonPositiveDenominator(f64),
    #[error("time index {index} outside 1..={k}")]
    BadTimeIndex { index: usize, k: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("design matrix is rank deficient; dependent columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("singular Jacobian in sandwich covariance")]
    SingularJacobian,
    #[error("non-finite moment contribution")]
    NonFiniteMoment,
    #[error("matrix is not positive semi-definite")]
    NotPsd,
    #[error("simplex search hit the iteration cap ({0})")]
    MaxIterExceeded(usize),
    #[error("effect grid incomplete: {0}")]
    IncompleteGrid(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate standard deviation at time {0}")]
    DegenerateSd(usize),
    #[error("exposure at time {0} has no variation left after adjustment")]
    DegenerateExposure(usize),
    #[error("instrument has zero variance")]
    DegenerateInstrument,
    #[error("non-positive weights")]
    NonPositiveWeights,
    #[error("singular moment system")]
    SingularMomentSystem,
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("under-identified: {0}")]
    UnderIdentified(String),
    #[error("fit has no coefficients for outcome time {0}")]
    MissingOutcomeBlock(usize),
    #[error("too many failed replications: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            MissingColumn(_)
            | NonFiniteValue { .. }
            | NonIncreasingTimes(_)
            | TooFewRows { .. }
            | ZeroPeriod
            | NonPositiveDenominator(_)
            | DegenerateInstrument
            | NonPositiveWeights
            | Io(_)
            | Csv(_)
            | Json(_) => ErrorKind::Data,
            BadTimeIndex { .. } | UnknownPreset(_) | InvalidConfig(_) | UnderIdentified(_) => {
                ErrorKind::Usage
            }
            _ => ErrorKind::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
