use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("item {item}: level {level} outside 0..{n_levels}")]
    LevelOutOfRange {
        item: String,
        level: usize,
        n_levels: usize,
    },

    #[error("specification error: {0}")]
    Spec(String),

    #[error("parameter layout error: expected {expected} values, got {got}")]
    Layout { expected: usize, got: usize },

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("QMC dimension {dim} unsupported (1..={max})")]
    Qmc { dim: usize, max: usize },

    #[error("subject {subject}: observed category of item {item} has zero probability")]
    ZeroProbability { subject: String, item: String },

    #[error("non-finite objective at coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("non-finite log-likelihood at the initial values")]
    Initialization,

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("subject {subject}: posterior mode search did not converge")]
    PosteriorMode { subject: String },

    #[error("rank-deficient test: {0}")]
    RankDeficient(String),

    #[error("models are not nested: {0}")]
    NotNested(String),
}
