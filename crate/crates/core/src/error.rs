use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid value at line {line}, column `{column}`: {message}")]
    Value {
        line: usize,
        column: String,
        message: String,
    },
    #[error("missing value at line {line}, column `{column}`")]
    Missing { line: usize, column: String },
    #[error("positivity violated: stratum `{stratum}` has no subjects in arm {arm}")]
    Positivity { stratum: String, arm: u8 },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("perfect separation detected in columns [{}]", .columns.join(", "))]
    Separation { columns: Vec<String> },
    #[error("design matrix is rank deficient; dependent columns [{}]", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("{what} did not converge after {iterations} iterations (last gradient norm {gradient_norm:e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        gradient_norm: f64,
    },
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("undefined estimand: {0}")]
    UndefinedEstimand(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by malformed or invalid input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Value { .. }
                | Error::Missing { .. }
                | Error::Positivity { .. }
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
