//! Behavioral system identification by perturbation: simulate a ground
//! truth, perturb it through policies, fit models to the records, and
//! judge the fit by trajectory-law discrepancies instead of parameter
//! recovery.

pub mod discrepancy;
pub mod domain;
pub mod equivalence;
pub mod error;
pub mod informativeness;
pub mod iohmm;
pub mod lgss;
pub mod linalg;
pub mod model;
pub mod policies;
pub mod reconstruction;
pub mod runner;
pub mod scenario;
pub mod seeds;

pub use discrepancy::{DiscrepancyKind, DiscrepancyResult, Normalization};
pub use domain::{
    Dataset, ExperimentalDomain, OutputSpace, Outputs, PerturbationSequence, PerturbationSplit,
    TrajectoryRecord,
};
pub use equivalence::{EquivalenceReport, IntrinsicOptions, IntrinsicReport};
pub use error::{Error, Result};
pub use informativeness::{DesignReport, DiscriminationReport};
pub use model::{ModelClass, ModelParams};
pub use policies::{PerturbationPolicy, PolicyKind};
pub use reconstruction::{FitOptions, FitReport, LossConfig};
pub use runner::{EnvironmentSpec, PipelineReport, Provenance, StageTimings};
pub use scenario::Scenario;
