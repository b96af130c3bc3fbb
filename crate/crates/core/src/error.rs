use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is rank deficient: numerical rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },

    #[error("iterative factorization did not converge")]
    NoConvergence,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is singular or not positive definite")]
    SingularMatrix,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("invalid exchangeability blocks: {0}")]
    InvalidBlocks(String),

    #[error("permutation set too large: {0}")]
    TooLarge(String),

    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("no valid selection of observations to drop: {0}")]
    NoValidSelection(String),

    #[error("requested {requested} components but at most {available} are available")]
    TooManyComponents { requested: usize, available: usize },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}
