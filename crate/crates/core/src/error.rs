//! Workbench-wide error type.

use thiserror::Error;

/// Errors produced by workbench operations.
///
/// Violations of data invariants that are *reported* rather than raised
/// (for example [`crate::domain::validate_domain`]) are not errors; this
/// enum covers contract breaches that abort an operation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("heterogeneous dataset: {0}")]
    HeterogeneousDataset(String),

    #[error("policy requires feedback history: {0}")]
    RequiresFeedback(String),

    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("EM log-likelihood decreased: {0}")]
    MonotonicityViolation(String),

    #[error("symbol out of range: {0}")]
    InvalidSymbol(String),

    #[error("exhaustive enumeration infeasible: {0}")]
    ExhaustiveInfeasible(String),

    #[error("matrix not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("empty sample set: {0}")]
    EmptySample(String),

    #[error("all replicate groups are singletons: {0}")]
    SingletonGroups(String),

    #[error("train/test split violated: {0}")]
    SplitViolation(String),

    #[error("insufficient replicates: {0}")]
    InsufficientReplicates(String),

    #[error("calibration unnecessary in exact-law mode: {0}")]
    CalibrationUnnecessary(String),

    #[error("discriminatory power undefined for fewer than two models: {0}")]
    VacuousInf(String),

    #[error("design budget exceeds policy pool: {0}")]
    BudgetExceedsPool(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(stage: &str, source: Error) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }

    /// The stage tag, if this error was raised inside a pipeline stage.
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
