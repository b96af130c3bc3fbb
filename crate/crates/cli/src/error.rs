use permcca_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}:{line}: expected {expected} fields, found {found}")]
    RaggedRows {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{0}")]
    Validation(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("cannot write output: {0}")]
    Output(String),
}

impl CliError {
    /// 2 for invalid input or options, 1 for numerical or output failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Parse { .. } | CliError::RaggedRows { .. } | CliError::Validation(_) => 2,
            CliError::Output(_) => 1,
            CliError::Core(e) => match e {
                CoreError::RankDeficient { .. }
                | CoreError::NoConvergence
                | CoreError::NotSymmetric(_)
                | CoreError::SingularMatrix
                | CoreError::NonFinite => 1,
                CoreError::DimensionMismatch(_)
                | CoreError::InvalidBlocks(_)
                | CoreError::TooLarge(_)
                | CoreError::InvalidOptions(_)
                | CoreError::InvalidDims(_)
                | CoreError::NoValidSelection(_)
                | CoreError::TooManyComponents { .. }
                | CoreError::UnknownScenario(_) => 2,
            },
        }
    }
}
