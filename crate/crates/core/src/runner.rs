//! Closed-loop experiment emulation and the end-to-end pipeline: a policy
//! drives an environment, the environment stimulates a virtual
//! participant, and the recorded trajectories feed the
//! fit / calibrate / validate chain.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{
    group_dataset, make_split, Dataset, ExperimentalDomain, Outputs, PerturbationSequence,
    PerturbationSplit, TrajectoryRecord,
};
use crate::equivalence::{self, EquivalenceReport, IntrinsicOptions, IntrinsicReport};
use crate::error::{Error, Result};
use crate::informativeness::{self, DesignReport, DiscriminationReport};
use crate::lgss::LgssSim;
use crate::linalg;
use crate::iohmm::{self, IoHmmSim};
use crate::model::{ModelParams};
use crate::policies::{self, PerturbationPolicy};
use crate::reconstruction::{self, ConsistencyRow, FitOptions, FitReport, LossConfig};
use crate::scenario::{DeltaSpec, Scenario};
use crate::seeds;

/// The world between policy and participant. Passthrough hands the policy
/// output over unchanged; the linear kind carries its own state
/// s_{t+1} = F s_t + G u_t and stimulates with H s_t, clamped to the
/// domain box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    Passthrough,
    Linear {
        f: Vec<Vec<f64>>,
        g: Vec<Vec<f64>>,
        h: Vec<Vec<f64>>,
    },
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        EnvironmentSpec::Passthrough
    }
}

/// Runtime form of the linear environment.
enum EnvState {
    Passthrough,
    Linear {
        f: DMatrix<f64>,
        g: DMatrix<f64>,
        h: DMatrix<f64>,
        s: DVector<f64>,
    },
}

impl EnvironmentSpec {
    /// Dimension checks against the input width m; returns the stepper.
    fn build(&self, m: usize) -> Result<EnvState> {
        match self {
            EnvironmentSpec::Passthrough => Ok(EnvState::Passthrough),
            EnvironmentSpec::Linear { f, g, h } => {
                let f = linalg::from_rows(f, "environment F")?;
                let g = linalg::from_rows(g, "environment G")?;
                let h = linalg::from_rows(h, "environment H")?;
                let k = f.nrows();
                if f.ncols() != k {
                    return Err(Error::DimensionMismatch(format!(
                        "environment F must be square, got {}x{}",
                        f.nrows(),
                        f.ncols()
                    )));
                }
                if g.nrows() != k || g.ncols() != m {
                    return Err(Error::DimensionMismatch(format!(
                        "environment G must be {k}x{m}, got {}x{}",
                        g.nrows(),
                        g.ncols()
                    )));
                }
                if h.nrows() != m || h.ncols() != k {
                    return Err(Error::DimensionMismatch(format!(
                        "environment H must be {m}x{k}, got {}x{}",
                        h.nrows(),
                        h.ncols()
                    )));
                }
                Ok(EnvState::Linear {
                    s: DVector::zeros(k),
                    f,
                    g,
                    h,
                })
            }
        }
    }
}

impl EnvState {
    /// Stimulus for the current step, before the policy output is folded
    /// into the environment state.
    fn stimulus(&self, u: &[f64], domain: &ExperimentalDomain) -> Vec<f64> {
        match self {
            EnvState::Passthrough => u.to_vec(),
            EnvState::Linear { h, s, .. } => {
                let mut out: Vec<f64> = (h * s).iter().copied().collect();
                domain.clamp_input(&mut out);
                out
            }
        }
    }

    fn advance(&mut self, u: &[f64]) {
        if let EnvState::Linear { f, g, s, .. } = self {
            let u = DVector::from_column_slice(u);
            *s = &*f * &*s + &*g * u;
        }
    }
}

/// Either participant simulator behind one stepping interface.
enum Participant {
    Continuous(LgssSim),
    Discrete(IoHmmSim, usize),
}

impl Participant {
    fn new(truth: &ModelParams, seed: u64) -> Result<Participant> {
        match truth {
            ModelParams::Lgss(p) => Ok(Participant::Continuous(LgssSim::new(p, seed)?)),
            ModelParams::Iohmm(p) => Ok(Participant::Discrete(IoHmmSim::new(p, seed)?, p.n_inputs())),
        }
    }
}

/// One closed-loop episode: the policy acts, the environment maps the
/// action to a stimulus, the participant responds. Recorded inputs are the
/// stimuli actually applied, so passthrough plus an open-loop policy is
/// bit-identical to direct simulation with the same derived seeds
/// (policy sequence from derive_seed(seed, "policy", 0), participant
/// draws from derive_seed(seed, "record", 0)).
pub fn run_closed_loop(
    truth: &ModelParams,
    environment: &EnvironmentSpec,
    policy: &PerturbationPolicy,
    domain: &ExperimentalDomain,
    seed: u64,
) -> Result<TrajectoryRecord> {
    run_closed_loop_seeded(
        truth,
        environment,
        policy,
        domain,
        seeds::derive_seed(seed, "policy", 0),
        seeds::derive_seed(seed, "record", 0),
    )
}

/// Closed loop with the policy and participant seeds split out, so
/// replicates can share one policy realization.
pub fn run_closed_loop_seeded(
    truth: &ModelParams,
    environment: &EnvironmentSpec,
    policy: &PerturbationPolicy,
    domain: &ExperimentalDomain,
    policy_seed: u64,
    sim_seed: u64,
) -> Result<TrajectoryRecord> {
    truth.validate()?;
    truth.class().check_domain(domain)?;
    let horizon = domain.horizon;
    let m = domain.input_dim;
    let mut env = environment.build(m)?;

    let adaptive = policy.is_adaptive();
    if adaptive && truth.is_discrete() {
        return Err(Error::RequiresFeedback(
            "adaptive feedback needs continuous outputs to close the loop on".into(),
        ));
    }
    let open_loop_values = if adaptive {
        None
    } else {
        Some(
            policies::generate_open_loop(policy, horizon, m, policy_seed, &domain.input_bounds)?
                .values,
        )
    };

    let mut participant = Participant::new(truth, sim_seed)?;
    let mut stimuli = DMatrix::zeros(horizon, m);
    let mut cont_y: DMatrix<f64> = DMatrix::zeros(horizon + 1, domain.output_dim);
    let mut disc_y: Vec<usize> = Vec::with_capacity(horizon + 1);

    for t in 0..=horizon {
        match &mut participant {
            Participant::Continuous(sim) => cont_y.row_mut(t).copy_from(&sim.emit().transpose()),
            Participant::Discrete(sim, _) => disc_y.push(sim.emit()),
        }
        if t == horizon {
            break;
        }
        let u_t: Vec<f64> = match &open_loop_values {
            Some(values) => values.row(t).iter().copied().collect(),
            None => policies::adaptive_step(policy, t, &cont_y.rows(0, t + 1).into_owned(), &domain.input_bounds)?,
        };
        let stim = env.stimulus(&u_t, domain);
        env.advance(&u_t);
        for (j, v) in stim.iter().enumerate() {
            stimuli[(t, j)] = *v;
        }
        match &mut participant {
            Participant::Continuous(sim) => {
                sim.step(&DVector::from_column_slice(&stim));
            }
            Participant::Discrete(sim, n_inputs) => {
                sim.step(iohmm::symbol_from_value(stim[0], *n_inputs)?)?;
            }
        }
    }

    let outputs = match participant {
        Participant::Continuous(..) => Outputs::Continuous(cont_y),
        Participant::Discrete(..) => Outputs::Discrete(disc_y),
    };
    Ok(TrajectoryRecord {
        inputs: PerturbationSequence {
            values: stimuli,
            policy_id: policy.id.clone(),
            seed: policy_seed,
        },
        outputs,
        truth_tag: None,
        seed: sim_seed,
    })
}

/// N = |policies|·reps records in (policy, rep) order. The policy seed is
/// derived per policy and shared across its reps, so open-loop replicates
/// share inputs bit-exactly and land in one group.
pub fn collect_dataset(
    truth: &ModelParams,
    environment: &EnvironmentSpec,
    policies: &[PerturbationPolicy],
    reps_per_policy: usize,
    domain: &ExperimentalDomain,
    seed: u64,
) -> Result<Dataset> {
    if reps_per_policy == 0 {
        return Err(Error::Config("reps_per_policy must be at least 1".into()));
    }
    if policies.is_empty() {
        return Err(Error::Config("collect_dataset needs at least one policy".into()));
    }
    use rayon::prelude::*;
    let jobs: Vec<(usize, usize)> = (0..policies.len())
        .flat_map(|i| (0..reps_per_policy).map(move |j| (i, j)))
        .collect();
    let records: Vec<TrajectoryRecord> = jobs
        .par_iter()
        .map(|&(i, j)| {
            run_closed_loop_seeded(
                truth,
                environment,
                &policies[i],
                domain,
                seeds::derive_seed(seed, "policy", i as u64),
                seeds::derive_seed(seed, "record", (i * reps_per_policy + j) as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    group_dataset(records)
}

/// Everything a rerun needs: seeds per stage, the config digest, and the
/// split actually used. Timings live outside the report so identical runs
/// stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub config_digest: String,
    pub train_policy_ids: Vec<String>,
    pub test_policy_ids: Vec<String>,
    pub n_train_records: usize,
    pub delta_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub fit_report: FitReport,
    pub equivalence_report: EquivalenceReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub discrimination_report: Option<DiscriminationReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub design_report: Option<DesignReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub consistency_table: Option<Vec<ConsistencyRow>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intrinsic_report: Option<IntrinsicReport>,
    pub provenance: Provenance,
}

/// Wall-clock seconds per stage, reported separately from the
/// deterministic pipeline output.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub seconds: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::in_stage(name, e))
}

/// Materialize the scenario's split spec: fraction mode draws a seeded
/// split over the domain family, explicit mode checks the given lists.
pub fn resolve_split(scenario: &Scenario, split_seed: u64) -> Result<PerturbationSplit> {
    let split = match &scenario.split {
        crate::scenario::SplitSpec::Fraction { test_fraction } => {
            make_split(&scenario.domain, *test_fraction, split_seed)?
        }
        crate::scenario::SplitSpec::Explicit { train, test } => PerturbationSplit {
            train_policy_ids: train.clone(),
            test_policy_ids: test.clone(),
        },
    };
    split.validate(&scenario.domain)?;
    Ok(split)
}

fn select_policies<'a>(
    all: &'a [PerturbationPolicy],
    ids: &[String],
) -> Result<Vec<&'a PerturbationPolicy>> {
    ids.iter()
        .map(|id| {
            all.iter()
                .find(|p| &p.id == id)
                .ok_or_else(|| Error::Config(format!("policy id {id:?} not defined in scenario")))
        })
        .collect()
}

/// Execute a scenario end to end: split policies, collect training data
/// from the truth, fit the declared model class, calibrate or adopt δ,
/// validate on the held-out policies, and run whatever optional analyses
/// the scenario asks for. Deterministic in (scenario, seed): the report
/// serializes byte-identically across reruns.
pub fn run_pipeline(scenario: &Scenario) -> Result<(PipelineReport, StageTimings)> {
    let t_start = Instant::now();
    let mut timings = StageTimings::default();
    let mut stage_seeds = BTreeMap::new();
    let master = scenario.seed;

    let record_time = |name: &str, from: Instant, timings: &mut StageTimings| {
        timings
            .seconds
            .insert(name.to_string(), from.elapsed().as_secs_f64());
    };

    // domain
    let t0 = Instant::now();
    stage("domain", scenario.validate())?;
    record_time("domain", t0, &mut timings);

    // split
    let t0 = Instant::now();
    let split_seed = seeds::derive_seed(master, "split", 0);
    stage_seeds.insert("split".into(), split_seed);
    let split = stage("split", resolve_split(scenario, split_seed))?;
    let train_pols: Vec<PerturbationPolicy> = stage(
        "split",
        select_policies(&scenario.policies, &split.train_policy_ids),
    )?
    .into_iter()
    .cloned()
    .collect();
    let test_pols: Vec<PerturbationPolicy> = stage(
        "split",
        select_policies(&scenario.policies, &split.test_policy_ids),
    )?
    .into_iter()
    .cloned()
    .collect();
    record_time("split", t0, &mut timings);

    // collect
    let t0 = Instant::now();
    let collect_seed = seeds::derive_seed(master, "collect", 0);
    stage_seeds.insert("collect".into(), collect_seed);
    let data = stage(
        "collect",
        collect_dataset(
            &scenario.truth,
            &scenario.environment,
            &train_pols,
            scenario.collection.reps_per_policy,
            &scenario.domain,
            collect_seed,
        ),
    )?;
    record_time("collect", t0, &mut timings);

    // fit
    let t0 = Instant::now();
    let init_seed = seeds::derive_seed(master, "init", 0);
    stage_seeds.insert("init".into(), init_seed);
    let fit_report = stage(
        "fit",
        fit_multi_start(
            &scenario.model_class,
            &data,
            &scenario.loss,
            &scenario.fit,
            scenario.fit_starts,
            init_seed,
        ),
    )?;
    record_time("fit", t0, &mut timings);

    // calibrate
    let t0 = Instant::now();
    let cal_seed = seeds::derive_seed(master, "calibrate", 0);
    let (delta, delta_source, sampled_mode) = match scenario.validation.delta {
        DeltaSpec::Fixed { value } => (value, "fixed".to_string(), false),
        DeltaSpec::Calibrate => {
            stage_seeds.insert("calibrate".into(), cal_seed);
            let d = stage(
                "calibrate",
                equivalence::calibrate_delta_sampled(
                    &scenario.truth,
                    &test_pols,
                    &scenario.domain,
                    scenario.validation.reps,
                    scenario.validation.n_calibration,
                    scenario.validation.quantile,
                    cal_seed,
                ),
            )?;
            // A noiseless truth calibrates to exactly 0; keep the verdict
            // threshold usable.
            (d.max(f64::MIN_POSITIVE), "calibrated".to_string(), true)
        }
    };
    record_time("calibrate", t0, &mut timings);

    // equivalence
    let t0 = Instant::now();
    let eq_seed = seeds::derive_seed(master, "equivalence", 0);
    stage_seeds.insert("equivalence".into(), eq_seed);
    let eq = if sampled_mode {
        equivalence::equivalence_test_sampled(
            &scenario.truth,
            &fit_report.theta_hat,
            &test_pols,
            &scenario.domain,
            delta,
            scenario.validation.reps,
            eq_seed,
        )
    } else {
        equivalence::equivalence_test(
            &scenario.truth,
            &fit_report.theta_hat,
            &test_pols,
            &scenario.domain,
            delta,
            scenario.validation.reps,
            eq_seed,
        )
    };
    let equivalence_report = stage("equivalence", eq)?;
    record_time("equivalence", t0, &mut timings);

    // optional: discriminatory power / design
    let mut discrimination_report = None;
    let mut design_report = None;
    if let Some(spec) = &scenario.informativeness {
        let t0 = Instant::now();
        let inf_seed = seeds::derive_seed(master, "informativeness", 0);
        stage_seeds.insert("informativeness".into(), inf_seed);
        let models: Vec<ModelParams> = if spec.models.is_empty() {
            vec![scenario.truth.clone(), fit_report.theta_hat.clone()]
        } else {
            spec.models.clone()
        };
        let pols: Vec<PerturbationPolicy> = if spec.policy_ids.is_empty() {
            test_pols.clone()
        } else {
            stage(
                "informativeness",
                select_policies(&scenario.policies, &spec.policy_ids),
            )?
            .into_iter()
            .cloned()
            .collect()
        };
        discrimination_report = Some(stage(
            "informativeness",
            informativeness::discriminatory_power(&models, &pols, &scenario.domain, inf_seed),
        )?);
        if let Some(budget) = spec.design_budget {
            design_report = Some(stage(
                "informativeness",
                informativeness::greedy_adaptive_design(
                    &models,
                    &pols,
                    budget,
                    &scenario.domain,
                    delta,
                    inf_seed,
                ),
            )?);
        }
        record_time("informativeness", t0, &mut timings);
    }

    // optional: intrinsic error
    let mut intrinsic_report = None;
    if let Some(spec) = &scenario.intrinsic {
        let t0 = Instant::now();
        let int_seed = seeds::derive_seed(master, "intrinsic", 0);
        stage_seeds.insert("intrinsic".into(), int_seed);
        // Evaluate on the same discrepancy mode as the verdict, so the
        // ε* estimate and δ share a scale.
        let opts = IntrinsicOptions {
            n_train: spec.n_train,
            reps: scenario.validation.reps,
            fit: scenario.fit.clone(),
            starts: None,
            force_sampled: sampled_mode,
        };
        intrinsic_report = Some(stage(
            "intrinsic",
            equivalence::intrinsic_error(
                &scenario.model_class,
                &scenario.truth,
                &train_pols,
                &test_pols,
                &scenario.domain,
                spec.fit_budget,
                &opts,
                int_seed,
            ),
        )?);
        record_time("intrinsic", t0, &mut timings);
    }

    // optional: consistency probe
    let mut consistency_table = None;
    if let Some(spec) = &scenario.consistency {
        let t0 = Instant::now();
        let probe_seed = seeds::derive_seed(master, "consistency", 0);
        stage_seeds.insert("consistency".into(), probe_seed);
        let policy = stage(
            "consistency",
            select_policies(&scenario.policies, std::slice::from_ref(&spec.policy_id)),
        )?[0];
        consistency_table = Some(stage(
            "consistency",
            reconstruction::consistency_probe(
                &scenario.truth,
                policy,
                &scenario.domain,
                &spec.ns,
                probe_seed,
            ),
        )?);
        record_time("consistency", t0, &mut timings);
    }

    timings.total_seconds = t_start.elapsed().as_secs_f64();
    let report = PipelineReport {
        fit_report,
        equivalence_report,
        discrimination_report,
        design_report,
        consistency_table,
        intrinsic_report,
        provenance: Provenance {
            master_seed: master,
            stage_seeds,
            config_digest: scenario.digest()?,
            train_policy_ids: split.train_policy_ids,
            test_policy_ids: split.test_policy_ids,
            n_train_records: data.len(),
            delta_source,
        },
    };
    Ok((report, timings))
}

/// Multi-start fit: derived inits, best final loss wins (first index on
/// ties). One start short-circuits to a plain fit.
/// Best of `starts` fits from random initializations; ties keep the
/// earlier start. Start k draws its init from derive_seed(seed, "start", k).
pub fn fit_multi_start(
    class: &crate::model::ModelClass,
    data: &Dataset,
    loss: &LossConfig,
    opts: &FitOptions,
    starts: usize,
    seed: u64,
) -> Result<FitReport> {
    if starts == 0 {
        return Err(Error::Config("fit_starts must be at least 1".into()));
    }
    let mut best: Option<FitReport> = None;
    for k in 0..starts {
        let init = crate::model::random_init(class, seeds::derive_seed(seed, "start", k as u64));
        let report = reconstruction::fit(&init, data, loss, opts)?;
        if best.as_ref().map_or(true, |b| report.final_loss < b.final_loss) {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one start"))
}
