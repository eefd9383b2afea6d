//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by callers that map errors to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or inconsistent input (data files, configs, schemas).
    Input,
    /// Estimation is undefined or numerically impossible on valid input.
    Estimation,
}

#[derive(Debug, Error)]
pub enum Error {
    // -- panel ingestion -------------------------------------------------
    #[error("missing column `{0}` in panel header")]
    MissingColumn(String),
    #[error("unexpected column `{0}` in panel header")]
    UnexpectedColumn(String),
    #[error("row {row}: column `{column}` value `{value}` is not a nonnegative integer")]
    NonIntegerTreatment {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: column `{column}` value {value} exceeds declared arity {arity}")]
    OutOfRangeValue {
        row: usize,
        column: String,
        value: u32,
        arity: u32,
    },
    #[error("row {row}: outcome `{value}` is not a finite number")]
    NonFiniteOutcome { row: usize, value: String },
    #[error("panel contains no data rows")]
    EmptyPanel,
    #[error("row {row}: expected {expected} cells, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    // -- stratum queries -------------------------------------------------
    #[error("conditioning stratum {0} is empty")]
    EmptyConditioningStratum(String),
    #[error("stratum {0} is empty")]
    EmptyStratum(String),
    #[error("no units with active treatment in stratum {0}")]
    EmptyActiveStratum(String),
    #[error("no control units in stratum {0}")]
    EmptyControlStratum(String),

    // -- point parametrization --------------------------------------------
    #[error("no proportion available for stratum {0}")]
    MissingProportion(String),
    #[error("point parameter missing for stratum {0}")]
    MissingPointParam(String),
    #[error("no mean recorded for cell {0}")]
    MissingCellMean(String),

    // -- patterns and net effects ------------------------------------------
    #[error("stratum {0} matches no pattern rule")]
    UncoveredStratum(String),
    #[error("class {0} has no member strata")]
    EmptyClass(usize),
    #[error("pattern declares mode `{expected}` but was applied in mode `{found}`")]
    PatternModeMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("coefficient matrix is rank deficient (rank {rank} < {k} classes)")]
    RankDeficientDesign { rank: usize, k: usize },
    #[error("{rows} usable rows but {k} classes to estimate")]
    TooFewRows { rows: usize, k: usize },
    #[error("weight matrix block for stratum {0} is singular")]
    SingularWeightMatrix(String),
    #[error("residual test has zero degrees of freedom (saturated pattern)")]
    ZeroDof,
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),

    // -- regimes and the G-formula ------------------------------------------
    #[error("cell {0} reachable under the regime has no recorded mean")]
    UnreachableCellMean(String),
    #[error("no transition proportion for covariates given stratum {0}")]
    MissingTransitionProportion(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
    #[error("regime decision at time {t} unresolved for covariate history {history}")]
    UnresolvedDecision { t: usize, history: String },

    // -- simulation ---------------------------------------------------------
    #[error("cell {cell} implies frequency {freq} at n={n}, which is not an integer")]
    NonIntegerFrequency { cell: String, freq: f64, n: u64 },
    #[error("probability vector for {context} sums to {sum}, expected 1")]
    ProbabilitySumError { context: String, sum: f64 },
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("confidence level {0} must lie strictly between 0 and 1")]
    InvalidLevel(f64),
    #[error("variance {0} is negative")]
    NegativeVariance(f64),

    // -- oracle ---------------------------------------------------------------
    #[error("no conditional counterfactual mean for stratum {0}")]
    MissingConditionalMean(String),

    // -- serialization ----------------------------------------------------------
    #[error("malformed key string `{0}`")]
    MalformedKey(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Classify the error for exit-code mapping: input problems versus
    /// estimation failures on otherwise valid input.
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            EmptyStratum(_)
            | EmptyConditioningStratum(_)
            | EmptyActiveStratum(_)
            | EmptyControlStratum(_)
            | RankDeficientDesign { .. }
            | TooFewRows { .. }
            | SingularWeightMatrix(_)
            | ZeroDof
            | MissingProportion(_)
            | MissingPointParam(_)
            | MissingCellMean(_)
            | UnreachableCellMean(_)
            | MissingTransitionProportion(_)
            | MissingConditionalMean(_) => ErrorKind::Estimation,
            _ => ErrorKind::Input,
        }
    }
}
