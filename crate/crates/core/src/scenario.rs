//! Declarative experiment configuration. A scenario file fixes everything
//! a pipeline run needs, so (scenario, seed) determines the report
//! byte for byte.

use serde::{Deserialize, Serialize};

use crate::domain::{validate_domain, ExperimentalDomain};
use crate::error::{Error, Result};
use crate::model::{ModelClass, ModelParams};
use crate::policies::PerturbationPolicy;
use crate::reconstruction::{FitOptions, LossConfig};
use crate::runner::EnvironmentSpec;
use crate::seeds;

/// How train and test policy sets are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Seeded shuffle of the domain's policy family.
    Fraction { test_fraction: f64 },
    /// Caller-fixed assignment.
    Explicit {
        train: Vec<String>,
        test: Vec<String>,
    },
}

/// Where the equivalence threshold comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DeltaSpec {
    /// Truth-vs-truth bootstrap quantile; forces sampled discrepancies so
    /// threshold and verdict share a statistic.
    Calibrate,
    Fixed { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationSpec {
    pub delta: DeltaSpec,
    /// Replicates per side in sampled mode.
    pub reps: usize,
    pub n_calibration: usize,
    pub quantile: f64,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        ValidationSpec {
            delta: DeltaSpec::Calibrate,
            reps: 50,
            n_calibration: 200,
            quantile: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionSpec {
    pub reps_per_policy: usize,
}

impl Default for CollectionSpec {
    fn default() -> Self {
        CollectionSpec { reps_per_policy: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InformativenessSpec {
    /// Candidate set; empty means {truth, fitted model}.
    pub models: Vec<ModelParams>,
    /// Policies to score; empty means the test set.
    pub policy_ids: Vec<String>,
    /// When set, also run the greedy design down to this many policies.
    pub design_budget: Option<usize>,
}

impl Default for InformativenessSpec {
    fn default() -> Self {
        InformativenessSpec {
            models: Vec::new(),
            policy_ids: Vec::new(),
            design_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySpec {
    /// Dataset sizes for the probe table.
    pub ns: Vec<usize>,
    /// Training policy the probe replays at each size.
    pub policy_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicSpec {
    pub fit_budget: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
}

fn default_n_train() -> usize {
    200
}

fn default_fit_starts() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub domain: ExperimentalDomain,
    /// Generating system the virtual participant runs.
    pub truth: ModelParams,
    /// Class the workbench fits; need not contain the truth.
    pub model_class: ModelClass,
    pub policies: Vec<PerturbationPolicy>,
    pub split: SplitSpec,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub validation: ValidationSpec,
    pub seed: u64,
    #[serde(default)]
    pub collection: CollectionSpec,
    #[serde(default)]
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default = "default_fit_starts")]
    pub fit_starts: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub informativeness: Option<InformativenessSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub consistency: Option<ConsistencySpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intrinsic: Option<IntrinsicSpec>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario parse: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read scenario {}: {e}", path.display()))
        })?;
        Scenario::from_json(&text)
    }

    fn policy_ids(&self) -> Vec<&str> {
        self.policies.iter().map(|p| p.id.as_str()).collect()
    }

    fn known_policy(&self, id: &str) -> bool {
        self.policies.iter().any(|p| p.id == id)
    }

    /// Cross-section coherence checks, run before any stage executes.
    pub fn validate(&self) -> Result<()> {
        let domain_violations = validate_domain(&self.domain);
        if !domain_violations.is_empty() {
            return Err(Error::Config(format!(
                "invalid domain: {}",
                domain_violations.join("; ")
            )));
        }
        self.truth.validate()?;
        self.truth.class().check_domain(&self.domain)?;
        self.model_class.check_domain(&self.domain)?;
        self.loss.validate()?;

        if self.policies.is_empty() {
            return Err(Error::Config("scenario defines no policies".into()));
        }
        let ids = self.policy_ids();
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(Error::Config(format!("duplicate policy id {id:?}")));
            }
        }
        for p in &self.policies {
            let v = p.validate();
            if !v.is_empty() {
                return Err(Error::Config(v.join("; ")));
            }
        }
        for id in &self.domain.policy_family_ids {
            if !self.known_policy(id) {
                return Err(Error::Config(format!(
                    "domain references undefined policy {id:?}"
                )));
            }
        }

        match &self.split {
            SplitSpec::Fraction { test_fraction } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "test_fraction must lie in (0,1), got {test_fraction}"
                    )));
                }
                if self.domain.policy_family_ids.len() != self.policies.len() {
                    return Err(Error::Config(
                        "fractional split needs the domain's policy family to list every \
                         scenario policy"
                            .into(),
                    ));
                }
            }
            SplitSpec::Explicit { train, test } => {
                if train.is_empty() || test.is_empty() {
                    return Err(Error::Config(
                        "explicit split needs nonempty train and test sets".into(),
                    ));
                }
                for id in train.iter().chain(test) {
                    if !self.known_policy(id) {
                        return Err(Error::Config(format!(
                            "split references undefined policy {id:?}"
                        )));
                    }
                }
                for id in train {
                    if test.contains(id) {
                        return Err(Error::SplitViolation(format!(
                            "policy '{id}' appears in both train and test sets"
                        )));
                    }
                }
            }
        }

        if self.validation.reps < 1 {
            return Err(Error::Config("validation reps must be at least 1".into()));
        }
        match self.validation.delta {
            DeltaSpec::Fixed { value } => {
                if !(value > 0.0) {
                    return Err(Error::Config(format!(
                        "fixed delta must be positive, got {value}"
                    )));
                }
            }
            DeltaSpec::Calibrate => {
                if self.validation.n_calibration < 1 {
                    return Err(Error::Config("n_calibration must be at least 1".into()));
                }
                if !(self.validation.quantile > 0.5 && self.validation.quantile < 1.0) {
                    return Err(Error::Config(format!(
                        "calibration quantile must lie in (0.5, 1), got {}",
                        self.validation.quantile
                    )));
                }
            }
        }

        if self.collection.reps_per_policy < 1 {
            return Err(Error::Config("reps_per_policy must be at least 1".into()));
        }
        if self.fit_starts < 1 {
            return Err(Error::Config("fit_starts must be at least 1".into()));
        }

        if let Some(inf) = &self.informativeness {
            for m in &inf.models {
                m.validate()?;
            }
            for id in &inf.policy_ids {
                if !self.known_policy(id) {
                    return Err(Error::Config(format!(
                        "informativeness references undefined policy {id:?}"
                    )));
                }
            }
            if inf.design_budget == Some(0) {
                return Err(Error::Config("design_budget must be at least 1".into()));
            }
        }
        if let Some(c) = &self.consistency {
            if c.ns.is_empty() {
                return Err(Error::Config("consistency ns must be nonempty".into()));
            }
            match self.policies.iter().find(|p| p.id == c.policy_id) {
                None => {
                    return Err(Error::Config(format!(
                        "consistency references undefined policy {:?}",
                        c.policy_id
                    )))
                }
                Some(p) if p.is_adaptive() => {
                    return Err(Error::Config(
                        "consistency probe needs an open-loop policy".into(),
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(i) = &self.intrinsic {
            if i.fit_budget < 1 {
                return Err(Error::Config("intrinsic fit_budget must be at least 1".into()));
            }
            if i.n_train < 1 {
                return Err(Error::Config("intrinsic n_train must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON form; the report's provenance pins
    /// the exact configuration it was produced from.
    pub fn digest(&self) -> Result<String> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Config(format!("scenario serialization: {e}")))?;
        Ok(format!("{:016x}", seeds::fnv1a(text.as_bytes())))
    }
}
