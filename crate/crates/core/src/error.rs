use thiserror::Error;

/// Errors raised across the library. CLI exit codes are derived from these
/// (every variant maps to exit code 1; usage errors are handled by clap).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("negative loss cost {0}")]
    NegativeLoss(f64),

    #[error("degenerate knot grid: {0}")]
    DegenerateGrid(String),

    #[error("no evaluation points supplied")]
    EmptyPoints,

    #[error("exposure {0} outside (0, 1]")]
    ExposureOutOfRange(f64),

    #[error("curve is not normalizable: value at t = 1 is {0}")]
    NonNormalizable(f64),

    #[error("non-positive exposure function value {value} at exposure {exposure}")]
    NonPositiveGamma { exposure: f64, value: f64 },

    #[error("empty portfolio")]
    EmptyPortfolio,

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("gamma-weight iteration did not settle: {0}")]
    GwmOscillation(String),

    #[error("group {0} has no contracts")]
    EmptyGroup(usize),

    #[error("unsupported scheme for this operation: {0}")]
    UnsupportedScheme(String),

    #[error("bootstrap aborted: {failed} of {total} replicates failed")]
    BootstrapFailed { failed: usize, total: usize },

    #[error("portfolio too small to stratify: {0}")]
    TooSmall(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("total weight is zero")]
    ZeroWeight,

    #[error("all losses are zero")]
    AllZeroLosses,

    #[error("missing columns in header: {0:?}")]
    MissingColumns(Vec<String>),

    #[error("{} invalid row(s); first: line {}: {}", .0.len(), .0[0].line, .0[0].message)]
    InvalidRows(Vec<RowError>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A rejected CSV row, with its 1-based line number in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, Error>;
