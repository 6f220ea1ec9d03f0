use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("treatment arm `{arm}` has {count} usable subjects within subset `{subset}`")]
    DegenerateSubset {
        subset: String,
        arm: String,
        count: usize,
    },
    #[error("all residuals are zero for `{0}`")]
    ZeroVariance(String),
    #[error("separation in `{label}`: arm `{arm}` has only {outcome} responses")]
    Separation {
        label: String,
        arm: String,
        outcome: u8,
    },
    #[error("IRLS did not converge for `{label}` within {iterations} iterations")]
    NoConvergence { label: String, iterations: usize },
    #[error("matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("invalid correlation matrix: {0}")]
    InvalidCorrelation(String),
    #[error("quadrature error {error:e} above target {target:e} (best estimate {value})")]
    AccuracyNotReached { value: f64, error: f64, target: f64 },
    #[error("models do not share one subject axis: {expected} vs {found} subjects")]
    MismatchedSubjectAxis { expected: usize, found: usize },
    #[error("model `{0}` has zero score variance")]
    DegenerateVariance(String),
    #[error("cell ({arm} arm, {subgroup} subgroup) has {count} observations, need at least 2")]
    EmptyCell {
        arm: String,
        subgroup: String,
        count: usize,
    },
    #[error("method `{method}` cannot be used here: {reason}")]
    IncompatibleMethod { method: String, reason: String },
    #[error("inconsistent count table: {0}")]
    InconsistentTotals(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical kernels rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::NotPsd { .. }
                | Error::AccuracyNotReached { .. }
                | Error::DegenerateVariance(_)
                | Error::ZeroVariance(_)
                | Error::Separation { .. }
        )
    }
}
