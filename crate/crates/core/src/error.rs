use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    // solvers
    #[error("logistic likelihood has no finite maximizer (quasi-separation)")]
    QuasiSeparation,
    #[error("singular Hessian: design is rank deficient among weighted rows")]
    SingularHessian,
    #[error("degenerate design: rank deficient among weighted rows")]
    DegenerateDesign,
    #[error("singular normal equations")]
    SingularNormalEquations,
    #[error("solver did not converge within {0} iterations")]
    NonConvergence(usize),

    // data
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("row {row}: negative selection variable c = {value}")]
    NegativeC { row: usize, value: f64 },
    #[error("row {row}: outcome missing on a selected row (c > 0)")]
    MissingYWhenSelected { row: usize },
    #[error("row {row}: outcome present on a censored row (c = 0)")]
    YPresentWhenCensored { row: usize },
    #[error("term `{term}` is not differentiable with respect to `{wrt}`")]
    NonDifferentiableTerm { term: String, wrt: String },
    #[error("cannot parse basis term `{0}`")]
    BadTerm(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    // control function
    #[error("threshold c = {threshold}: {source}")]
    AtThreshold {
        threshold: f64,
        #[source]
        source: Box<Error>,
    },
    #[error("basis specifications differ across groups")]
    BasisMismatch,

    // effects
    #[error("trimmed sample is empty")]
    EmptyTrimmedSample,
    #[error("conditioning cell has no trimmed observations")]
    EmptyConditioningCell,
    #[error("no group-k row passes the group-r selection condition")]
    EmptySelectedCell,
    #[error("distribution never crosses tau = {0} on the evaluation grid")]
    TauOutsideRange(f64),

    // inference
    #[error("{failed} of {total} bootstrap replications failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("all bootstrap scales are zero")]
    DegenerateScale,
    #[error("singular J matrix")]
    SingularJ,

    #[error("io: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn at_threshold(threshold: f64, source: Error) -> Self {
        Error::AtThreshold {
            threshold,
            source: Box::new(source),
        }
    }

    /// Strips threshold/grid context and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtThreshold { source, .. } => source.root(),
            e => e,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
