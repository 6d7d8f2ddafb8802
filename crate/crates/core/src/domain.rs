//! Core data model: bounded experimental domain, perturbation sequences,
//! trajectories, datasets, and train/test splits.
//!
//! Time-indexing convention used throughout the workbench: an experiment of
//! horizon T carries T input steps `u_0..u_{T-1}` and T+1 output samples
//! `y_0..y_T`. `y_0` is emitted before any input takes effect; `u_t` drives
//! the state transition into step t+1.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Admissible output space: continuous real channels or a finite alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputSpace {
    Continuous { dim: usize },
    Discrete { size: usize },
}

/// The bounded experimental domain: admissible inputs, output space,
/// horizon, and the family of perturbation policies an experiment may use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentalDomain {
    /// Input dimension m.
    pub input_dim: usize,
    /// Output dimension p (1 for discrete-alphabet outputs).
    pub output_dim: usize,
    /// Per-dimension closed interval `[lo_j, hi_j]` bounding admissible inputs.
    pub input_bounds: Vec<(f64, f64)>,
    /// Admissible output space descriptor. Recorded, not enforced: outputs
    /// are system-generated.
    pub output_space: OutputSpace,
    /// Experiment horizon T (number of input steps).
    pub horizon: usize,
    /// Ordered identifiers of the admissible policy family.
    pub policy_family_ids: Vec<String>,
}

impl ExperimentalDomain {
    /// Clamp an input vector into the domain box, in place.
    pub fn clamp_input(&self, u: &mut [f64]) {
        for (j, v) in u.iter_mut().enumerate() {
            let (lo, hi) = self.input_bounds[j];
            *v = v.clamp(lo, hi);
        }
    }

    /// Whether every entry of a T×m input matrix lies inside the box.
    pub fn contains_inputs(&self, values: &DMatrix<f64>) -> bool {
        if values.ncols() != self.input_dim {
            return false;
        }
        for t in 0..values.nrows() {
            for j in 0..values.ncols() {
                let (lo, hi) = self.input_bounds[j];
                let v = values[(t, j)];
                if v < lo || v > hi {
                    return false;
                }
            }
        }
        true
    }
}

/// A realized input trajectory `u_0..u_{T-1}` (row = time step).
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSequence {
    /// T×m matrix of input values, time-major.
    pub values: DMatrix<f64>,
    /// Identifier of the generating policy.
    pub policy_id: String,
    /// Seed the sequence was generated from.
    pub seed: u64,
}

impl PerturbationSequence {
    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.values.ncols()
    }

    /// Input vector at step t.
    pub fn at(&self, t: usize) -> Vec<f64> {
        self.values.row(t).iter().copied().collect()
    }

    /// Bit-pattern key used for replicate grouping.
    fn bit_key(&self) -> Vec<u64> {
        self.values.iter().map(|v| v.to_bits()).collect()
    }
}

/// Output samples `y_0..y_T`: continuous channels or a symbol sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Outputs {
    /// (T+1)×p matrix, time-major.
    Continuous(DMatrix<f64>),
    /// T+1 symbols from a finite alphabet.
    Discrete(Vec<usize>),
}

impl Outputs {
    /// Number of time samples (T+1).
    pub fn len(&self) -> usize {
        match self {
            Outputs::Continuous(m) => m.nrows(),
            Outputs::Discrete(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Output channel count: p for continuous, 1 for discrete.
    pub fn channel_dim(&self) -> usize {
        match self {
            Outputs::Continuous(m) => m.ncols(),
            Outputs::Discrete(_) => 1,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Outputs::Discrete(_))
    }

    /// Continuous output matrix, or DimensionMismatch for symbol sequences.
    pub fn as_continuous(&self) -> Result<&DMatrix<f64>> {
        match self {
            Outputs::Continuous(m) => Ok(m),
            Outputs::Discrete(_) => Err(Error::DimensionMismatch(
                "discrete outputs passed to a continuous-model operation".to_string(),
            )),
        }
    }

    /// Symbol sequence, or DimensionMismatch for continuous outputs.
    pub fn as_discrete(&self) -> Result<&[usize]> {
        match self {
            Outputs::Discrete(s) => Ok(s),
            Outputs::Continuous(_) => Err(Error::DimensionMismatch(
                "continuous outputs passed to a discrete-model operation".to_string(),
            )),
        }
    }
}

/// One perturbation-response pair (u, y).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub inputs: PerturbationSequence,
    pub outputs: Outputs,
    /// Identifier of the generating system, when known.
    pub truth_tag: Option<String>,
    /// Seed of the stochastic response draw.
    pub seed: u64,
}

impl TrajectoryRecord {
    /// Outputs must carry exactly one more time index than inputs.
    pub fn validate_shape(&self) -> Result<()> {
        let t = self.inputs.horizon();
        if self.outputs.len() != t + 1 {
            return Err(Error::DimensionMismatch(format!(
                "outputs have {} samples, expected {} for horizon {}",
                self.outputs.len(),
                t + 1,
                t
            )));
        }
        Ok(())
    }
}

/// A collection of trajectory records with replicate groups: records whose
/// input matrices are bit-identical share a group.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<TrajectoryRecord>,
    /// Record indices per distinct input sequence, in first-occurrence order.
    /// The groups partition `0..records.len()`.
    pub groups: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Disjoint train/test partition of a domain's policy family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSplit {
    pub train_policy_ids: Vec<String>,
    pub test_policy_ids: Vec<String>,
}

impl PerturbationSplit {
    /// Check disjointness and membership in the owning domain's family.
    pub fn validate(&self, domain: &ExperimentalDomain) -> Result<()> {
        for id in &self.train_policy_ids {
            if self.test_policy_ids.contains(id) {
                return Err(Error::SplitViolation(format!(
                    "policy '{id}' appears in both train and test sets"
                )));
            }
        }
        for id in self.train_policy_ids.iter().chain(&self.test_policy_ids) {
            if !domain.policy_family_ids.contains(id) {
                return Err(Error::SplitViolation(format!(
                    "policy '{id}' is not in the domain's policy family"
                )));
            }
        }
        Ok(())
    }
}

/// Collect every invariant violation of a domain. Empty means valid.
pub fn validate_domain(domain: &ExperimentalDomain) -> Vec<String> {
    let mut violations = Vec::new();
    if domain.input_dim < 1 {
        violations.push("input_dim must be >= 1".to_string());
    }
    if domain.output_dim < 1 {
        violations.push("output_dim must be >= 1".to_string());
    }
    if domain.horizon < 1 {
        violations.push("horizon must be >= 1".to_string());
    }
    if domain.input_bounds.len() != domain.input_dim {
        violations.push(format!(
            "input_bounds has {} entries, expected {}",
            domain.input_bounds.len(),
            domain.input_dim
        ));
    }
    for (j, &(lo, hi)) in domain.input_bounds.iter().enumerate() {
        if lo > hi {
            violations.push(format!("lo > hi at dim {j}"));
        }
        if !lo.is_finite() || !hi.is_finite() {
            violations.push(format!("non-finite bound at dim {j}"));
        }
    }
    match &domain.output_space {
        OutputSpace::Continuous { dim } => {
            if *dim != domain.output_dim {
                violations.push(format!(
                    "continuous output space dim {dim} disagrees with output_dim {}",
                    domain.output_dim
                ));
            }
        }
        OutputSpace::Discrete { size } => {
            if *size < 1 {
                violations.push("discrete alphabet must be non-empty".to_string());
            }
            if domain.output_dim != 1 {
                violations.push(
                    "discrete outputs are single-channel symbol sequences (output_dim must be 1)"
                        .to_string(),
                );
            }
        }
    }
    if domain.policy_family_ids.is_empty() {
        violations.push("policy family is empty".to_string());
    }
    let mut seen = HashMap::new();
    for id in &domain.policy_family_ids {
        if seen.insert(id.clone(), ()).is_some() {
            violations.push(format!("duplicate policy id '{id}'"));
        }
    }
    violations
}

/// Deterministically split the domain's policy family into disjoint train
/// and test sets. `|test| = max(1, round(test_fraction·|Π|))`, clamped so at
/// least one policy stays in the train set.
pub fn make_split(
    domain: &ExperimentalDomain,
    test_fraction: f64,
    seed: u64,
) -> Result<PerturbationSplit> {
    let n = domain.policy_family_ids.len();
    if n < 2 {
        return Err(Error::SplitInfeasible(format!(
            "need at least 2 policy families, have {n}"
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::SplitInfeasible(format!(
            "test_fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeds::rng_for(seed, "make_split", 0);
    idx.shuffle(&mut rng);
    let mut test_idx: Vec<usize> = idx[..n_test].to_vec();
    let mut train_idx: Vec<usize> = idx[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(PerturbationSplit {
        train_policy_ids: train_idx
            .into_iter()
            .map(|i| domain.policy_family_ids[i].clone())
            .collect(),
        test_policy_ids: test_idx
            .into_iter()
            .map(|i| domain.policy_family_ids[i].clone())
            .collect(),
    })
}

/// Group records into replicate sets keyed on bit-identical input matrices.
pub fn group_dataset(records: Vec<TrajectoryRecord>) -> Result<Dataset> {
    if let Some(first) = records.first() {
        let m = first.inputs.input_dim();
        let p = first.outputs.channel_dim();
        let discrete = first.outputs.is_discrete();
        for (i, r) in records.iter().enumerate() {
            if r.inputs.input_dim() != m
                || r.outputs.channel_dim() != p
                || r.outputs.is_discrete() != discrete
            {
                return Err(Error::HeterogeneousDataset(format!(
                    "record {i} has input/output dims ({}, {}) but record 0 has ({m}, {p})",
                    r.inputs.input_dim(),
                    r.outputs.channel_dim()
                )));
            }
            r.validate_shape()?;
        }
    }
    let mut key_to_group: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let key = r.inputs.bit_key();
        match key_to_group.get(&key) {
            Some(&g) => groups[g].push(i),
            None => {
                key_to_group.insert(key, groups.len());
                groups.push(vec![i]);
            }
        }
    }
    Ok(Dataset { records, groups })
}

// --- Dataset serialization -------------------------------------------------
//
// One CSV per record with header "t,u_0..u_{m-1},y_0..y_{p-1}" (u columns
// blank at row t=T), plus a JSON manifest listing records, seeds, policy
// ids, and dims. Floats are written with 17 significant digits so the
// round-trip is bit-exact.

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    file: String,
    policy_id: String,
    input_seed: u64,
    record_seed: u64,
    truth_tag: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    input_dim: usize,
    output_dim: usize,
    horizon: usize,
    output_kind: String,
    records: Vec<ManifestRecord>,
}

/// 17-significant-digit decimal form; parses back to the identical f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a dataset as per-record CSVs plus `manifest.json` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest_records = Vec::with_capacity(dataset.records.len());
    for (i, record) in dataset.records.iter().enumerate() {
        let file = format!("record_{i:05}.csv");
        let mut csv = String::new();
        let m = record.inputs.input_dim();
        let p = record.outputs.channel_dim();
        csv.push('t');
        for j in 0..m {
            let _ = write!(csv, ",u_{j}");
        }
        for j in 0..p {
            let _ = write!(csv, ",y_{j}");
        }
        csv.push('\n');
        let horizon = record.inputs.horizon();
        for t in 0..=horizon {
            let _ = write!(csv, "{t}");
            for j in 0..m {
                if t < horizon {
                    let _ = write!(csv, ",{}", format_f64(record.inputs.values[(t, j)]));
                } else {
                    csv.push(',');
                }
            }
            match &record.outputs {
                Outputs::Continuous(y) => {
                    for j in 0..p {
                        let _ = write!(csv, ",{}", format_f64(y[(t, j)]));
                    }
                }
                Outputs::Discrete(sym) => {
                    let _ = write!(csv, ",{}", sym[t]);
                }
            }
            csv.push('\n');
        }
        std::fs::write(dir.join(&file), csv)?;
        manifest_records.push(ManifestRecord {
            file,
            policy_id: record.inputs.policy_id.clone(),
            input_seed: record.inputs.seed,
            record_seed: record.seed,
            truth_tag: record.truth_tag.clone(),
        });
    }
    let (horizon, output_kind, output_dim, input_dim) = match dataset.records.first() {
        Some(r) => (
            r.inputs.horizon(),
            if r.outputs.is_discrete() {
                "discrete"
            } else {
                "continuous"
            },
            r.outputs.channel_dim(),
            r.inputs.input_dim(),
        ),
        None => (0, "continuous", 0, 0),
    };
    let manifest = Manifest {
        input_dim,
        output_dim,
        horizon,
        output_kind: output_kind.to_string(),
        records: manifest_records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a dataset previously written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let discrete = manifest.output_kind == "discrete";
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let text = std::fs::read_to_string(dir.join(&entry.file))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{}: empty csv", entry.file)))?;
        let cols = header.split(',').count();
        let expected = 1 + manifest.input_dim + manifest.output_dim;
        if cols != expected {
            return Err(Error::Config(format!(
                "{}: {cols} columns, expected {expected}",
                entry.file
            )));
        }
        let t_total = manifest.horizon;
        let mut u = DMatrix::zeros(t_total, manifest.input_dim);
        let mut y_cont = DMatrix::zeros(t_total + 1, manifest.output_dim);
        let mut y_disc = Vec::with_capacity(t_total + 1);
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let t: usize = fields[0]
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad time index", entry.file)))?;
            for j in 0..manifest.input_dim {
                let cell = fields[1 + j];
                if t < t_total {
                    u[(t, j)] = cell
                        .parse()
                        .map_err(|_| Error::Config(format!("{}: bad input cell", entry.file)))?;
                } else if !cell.is_empty() {
                    return Err(Error::Config(format!(
                        "{}: input cell present at t=T",
                        entry.file
                    )));
                }
            }
            for j in 0..manifest.output_dim {
                let cell = fields[1 + manifest.input_dim + j];
                if discrete {
                    y_disc.push(cell.parse::<usize>().map_err(|_| {
                        Error::Config(format!("{}: bad symbol cell", entry.file))
                    })?);
                } else {
                    y_cont[(t, j)] = cell
                        .parse()
                        .map_err(|_| Error::Config(format!("{}: bad output cell", entry.file)))?;
                }
            }
        }
        let outputs = if discrete {
            Outputs::Discrete(y_disc)
        } else {
            Outputs::Continuous(y_cont)
        };
        records.push(TrajectoryRecord {
            inputs: PerturbationSequence {
                values: u,
                policy_id: entry.policy_id.clone(),
                seed: entry.input_seed,
            },
            outputs,
            truth_tag: entry.truth_tag.clone(),
            seed: entry.record_seed,
        });
    }
    group_dataset(records)
}
