use thiserror::Error;

/// Errors raised by the fitting, prediction and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty reference set")]
    EmptyReferenceSet,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("duplicate coordinates at rows {first} and {second}")]
    DuplicateLocation { first: usize, second: usize },

    #[error("non-finite coordinate at row {row}")]
    NonFiniteCoordinate { row: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular neighbor covariance block at ordered index {index}")]
    SingularNeighborBlock { index: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("level {level} requires the imputed field of level {prev}")]
    MissingPreviousLevel { level: usize, prev: usize },

    #[error("invalid fold count K = {k} for {n} observations")]
    InvalidFolds { k: usize, n: usize },

    #[error("chain diverged: {0}")]
    Divergence(String),

    #[error("{n} locations exceed the dense simulation limit of {limit}; simulate level-wise instead")]
    TooLargeForDense { n: usize, limit: usize },

    #[error("observations are constant")]
    ConstantObservations,

    #[error("no records")]
    EmptyRecords,

    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
