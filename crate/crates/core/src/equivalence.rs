//! Held-out equivalence validation: sup-discrepancy over test policies
//! against a tolerance δ, truth-bootstrap calibration of δ, and the
//! multi-start intrinsic-error estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrepancy::{self, DiscrepancyKind};
use crate::domain::{ExperimentalDomain, PerturbationSequence};
use crate::error::{Error, Result};
use crate::iohmm;
use crate::model::{self, ModelClass, ModelParams};
use crate::policies::{self, PerturbationPolicy};
use crate::reconstruction::{self, FitOptions, LossConfig};
use crate::seeds;

/// Sampled mode needs enough replicates for the energy statistic to mean
/// anything.
const MIN_REPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub policy_id: String,
    pub value: f64,
    pub kind: DiscrepancyKind,
}

/// Per-policy seed bookkeeping: the sequence seed plus the bases the two
/// sides' replicate draws derive from (rep j uses derive_seed(base, "rep", j)).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySeedRecord {
    pub policy_id: String,
    pub sequence: u64,
    pub truth_side: u64,
    pub model_side: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceSeeds {
    pub master: u64,
    pub per_policy: Vec<PolicySeedRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub per_policy: Vec<PolicyEval>,
    pub sup_value: f64,
    pub delta: f64,
    pub pass: bool,
    /// 0 in exact-law mode (no sampling happened).
    pub replicates_per_policy: usize,
    pub seeds: EquivalenceSeeds,
}

/// Whether this model admits an exact trajectory law at the domain horizon.
pub fn exact_capable(params: &ModelParams, domain: &ExperimentalDomain) -> bool {
    match params {
        ModelParams::Lgss(_) => true,
        ModelParams::Iohmm(p) => iohmm::exhaustive_feasible(p.n_obs(), domain.horizon + 1),
    }
}

fn check_policy_ids(policies: &[PerturbationPolicy]) -> Result<()> {
    if policies.is_empty() {
        return Err(Error::Config("no test policies supplied".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for p in policies {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::SplitViolation(format!(
                "policy id {:?} appears more than once",
                p.id
            )));
        }
    }
    Ok(())
}

fn sampled_side(
    params: &ModelParams,
    seq: &PerturbationSequence,
    reps: usize,
    base: u64,
) -> Result<Vec<nalgebra::DVector<f64>>> {
    let space = params.output_space();
    (0..reps)
        .map(|j| {
            let rec = params.simulate(seq, seeds::derive_seed(base, "rep", j as u64))?;
            model::embed_outputs(&rec.outputs, &space)
        })
        .collect()
}

fn evaluate(
    truth: &ModelParams,
    model: &ModelParams,
    test_policies: &[PerturbationPolicy],
    domain: &ExperimentalDomain,
    delta: f64,
    reps: usize,
    seed: u64,
    force_sampled: bool,
) -> Result<EquivalenceReport> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    if reps < 1 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    check_policy_ids(test_policies)?;
    truth.validate()?;
    model.validate()?;
    if truth.output_space() != model.output_space() {
        return Err(Error::DimensionMismatch(
            "truth and model emit into different output spaces".into(),
        ));
    }
    let exact = !force_sampled
        && truth.is_discrete() == model.is_discrete()
        && exact_capable(truth, domain)
        && exact_capable(model, domain);
    if !exact && reps < MIN_REPS {
        return Err(Error::InsufficientReplicates(format!(
            "sampled mode needs at least {MIN_REPS} replicates per side, got {reps}"
        )));
    }

    let seed_records: Vec<PolicySeedRecord> = test_policies
        .iter()
        .enumerate()
        .map(|(i, p)| PolicySeedRecord {
            policy_id: p.id.clone(),
            sequence: seeds::derive_seed(seed, "equiv_seq", i as u64),
            truth_side: seeds::derive_seed(seed, "equiv_truth", i as u64),
            model_side: seeds::derive_seed(seed, "equiv_model", i as u64),
        })
        .collect();

    let per_policy: Vec<PolicyEval> = test_policies
        .par_iter()
        .zip(seed_records.par_iter())
        .map(|(policy, sr)| {
            let seq = policies::generate_open_loop(
                policy,
                domain.horizon,
                domain.input_dim,
                sr.sequence,
                &domain.input_bounds,
            )?;
            if exact {
                let d = model::law_distance(&truth.exact_law(&seq)?, &model.exact_law(&seq)?)?;
                Ok(PolicyEval {
                    policy_id: policy.id.clone(),
                    value: d.value,
                    kind: d.kind,
                })
            } else {
                let xs = sampled_side(truth, &seq, reps, sr.truth_side)?;
                let ys = sampled_side(model, &seq, reps, sr.model_side)?;
                let d = discrepancy::energy_distance(&xs, &ys)?;
                Ok(PolicyEval {
                    policy_id: policy.id.clone(),
                    value: d.value,
                    kind: d.kind,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let sup_value = per_policy.iter().map(|e| e.value).fold(f64::NEG_INFINITY, f64::max);
    Ok(EquivalenceReport {
        pass: sup_value <= delta,
        sup_value,
        delta,
        replicates_per_policy: if exact { 0 } else { reps },
        per_policy,
        seeds: EquivalenceSeeds {
            master: seed,
            per_policy: seed_records,
        },
    })
}

/// Equivalence verdict for `model` against `truth` on held-out policies:
/// one sequence per policy at a derived seed, exact law-vs-law distance
/// when both sides admit exact laws, otherwise energy distance on `reps`
/// simulated trajectories per side. Disjointness from the training
/// policies is the caller's contract (via PerturbationSplit); duplicate
/// ids inside the test set are rejected here.
pub fn equivalence_test(
    truth: &ModelParams,
    model: &ModelParams,
    test_policies: &[PerturbationPolicy],
    domain: &ExperimentalDomain,
    delta: f64,
    reps: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    evaluate(truth, model, test_policies, domain, delta, reps, seed, false)
}

/// Same test with sampling forced even where exact laws exist. This is the
/// variant a calibrated δ is consistent with: the threshold is a quantile
/// of sampled sup-discrepancies, so the verdict must be computed on the
/// same statistic.
pub fn equivalence_test_sampled(
    truth: &ModelParams,
    model: &ModelParams,
    test_policies: &[PerturbationPolicy],
    domain: &ExperimentalDomain,
    delta: f64,
    reps: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    evaluate(truth, model, test_policies, domain, delta, reps, seed, true)
}

fn calibrate_core(
    truth: &ModelParams,
    test_policies: &[PerturbationPolicy],
    domain: &ExperimentalDomain,
    reps: usize,
    n_calibration: usize,
    quantile: f64,
    seed: u64,
) -> Result<f64> {
    if !(quantile > 0.5 && quantile < 1.0) {
        return Err(Error::Config(format!(
            "calibration quantile must lie in (0.5, 1), got {quantile}"
        )));
    }
    if n_calibration == 0 {
        return Err(Error::Config("n_calibration must be at least 1".into()));
    }
    let mut sups: Vec<f64> = (0..n_calibration)
        .into_par_iter()
        .map(|c| {
            let rep_seed = seeds::derive_seed(seed, "cal_rep", c as u64);
            evaluate(
                truth,
                truth,
                test_policies,
                domain,
                f64::INFINITY,
                reps,
                rep_seed,
                true,
            )
            .map(|r| r.sup_value)
        })
        .collect::<Result<Vec<_>>>()?;
    sups.sort_by(|a, b| a.total_cmp(b));
    let idx = ((quantile * n_calibration as f64).ceil() as usize).clamp(1, n_calibration) - 1;
    Ok(sups[idx])
}

/// Calibrate δ as the `quantile` of truth-vs-truth sup-discrepancy over
/// n_calibration fresh replications, each a full sampled equivalence
/// experiment under its own derived seed. Only meaningful where the
/// equivalence test itself will sample: a truth with exact laws at this
/// horizon is rejected, since its test statistic has no sampling noise.
pub fn calibrate_delta(
    truth: &ModelParams,
    test_policies: &[PerturbationPolicy],
    domain: &ExperimentalDomain,
    reps: usize,
    n_calibration: usize,
    quantile: f64,
    seed: u64,
) -> Result<f64> {
    if exact_capable(truth, domain) {
        return Err(Error::CalibrationUnnecessary(
            "truth admits exact trajectory laws at this horizon; compare laws directly".into(),
        ));
    }
    if reps < MIN_REPS {
        return Err(Error::InsufficientReplicates(format!(
            "calibration needs at least {MIN_REPS} replicates per side, got {reps}"
        )));
    }
    calibrate_core(truth, test_policies, domain, reps, n_calibration, quantile, seed)
}

/// Calibration with sampling forced, for pairing with
/// equivalence_test_sampled on exact-capable truths.
pub fn calibrate_delta_sampled(
    truth: &ModelParams,
    test_policies: &[PerturbationPolicy],
    domain: &ExperimentalDomain,
    reps: usize,
    n_calibration: usize,
    quantile: f64,
    seed: u64,
) -> Result<f64> {
    if reps < MIN_REPS {
        return Err(Error::InsufficientReplicates(format!(
            "calibration needs at least {MIN_REPS} replicates per side, got {reps}"
        )));
    }
    calibrate_core(truth, test_policies, domain, reps, n_calibration, quantile, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IntrinsicOptions {
    /// Training records drawn from truth, spread round-robin over the
    /// training policies.
    pub n_train: usize,
    /// Replicates per side when test-policy discrepancies are sampled.
    pub reps: usize,
    pub fit: FitOptions,
    /// Explicit fit starts; when present they replace the random ones and
    /// fit_budget counts into them.
    pub starts: Option<Vec<ModelParams>>,
    /// Evaluate on sampled discrepancies even where exact laws exist, so
    /// the estimate sits on the same scale as a calibrated threshold.
    pub force_sampled: bool,
}

impl Default for IntrinsicOptions {
    fn default() -> Self {
        IntrinsicOptions {
            n_train: 200,
            reps: 50,
            fit: FitOptions::default(),
            starts: None,
            force_sampled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicReport {
    pub epsilon_star_estimate: f64,
    pub best_theta: ModelParams,
    /// Sup-discrepancy per start, in start order.
    pub per_start: Vec<f64>,
}

/// Upper bound on the intrinsic reconstruction error ε* of a model class
/// against a truth: multi-start NLL fits on a shared training set, then
/// the minimum over starts of the sup test-policy discrepancy between the
/// fitted model and the truth. Starts are derived prefix-stably from the
/// seed, so a larger fit_budget extends rather than reshuffles the search
/// and the estimate is nonincreasing in the budget.
pub fn intrinsic_error(
    model_class: &ModelClass,
    truth: &ModelParams,
    train_policies: &[PerturbationPolicy],
    test_policies: &[PerturbationPolicy],
    domain: &ExperimentalDomain,
    fit_budget: usize,
    opts: &IntrinsicOptions,
    seed: u64,
) -> Result<IntrinsicReport> {
    if test_policies.is_empty() {
        return Err(Error::Config("intrinsic error needs test policies".into()));
    }
    if train_policies.is_empty() {
        return Err(Error::Config("intrinsic error needs training policies".into()));
    }
    if fit_budget == 0 {
        return Err(Error::Config("fit_budget must be at least 1".into()));
    }
    truth.validate()?;
    model_class.check_domain(domain)?;

    let mut records = Vec::with_capacity(opts.n_train);
    for i in 0..opts.n_train {
        let policy = &train_policies[i % train_policies.len()];
        let seq = policies::generate_open_loop(
            policy,
            domain.horizon,
            domain.input_dim,
            seeds::derive_seed(seed, "intrinsic_input", i as u64),
            &domain.input_bounds,
        )?;
        records.push(truth.simulate(&seq, seeds::derive_seed(seed, "intrinsic_record", i as u64))?);
    }
    let data = crate::domain::group_dataset(records)?;

    let starts: Vec<ModelParams> = match &opts.starts {
        Some(list) => list.iter().take(fit_budget).cloned().collect(),
        None => (0..fit_budget)
            .map(|k| model::random_init(model_class, seeds::derive_seed(seed, "intrinsic_init", k as u64)))
            .collect(),
    };
    if starts.is_empty() {
        return Err(Error::Config("no fit starts available".into()));
    }

    let loss = LossConfig::default();
    let mut per_start = Vec::with_capacity(starts.len());
    let mut best: Option<(f64, ModelParams)> = None;
    for (k, init) in starts.iter().enumerate() {
        let report = reconstruction::fit(init, &data, &loss, &opts.fit)?;
        let eval = evaluate(
            truth,
            &report.theta_hat,
            test_policies,
            domain,
            f64::INFINITY,
            opts.reps,
            seeds::derive_seed(seed, "intrinsic_eval", k as u64),
            opts.force_sampled,
        )?;
        per_start.push(eval.sup_value);
        if best.as_ref().map_or(true, |(b, _)| eval.sup_value < *b) {
            best = Some((eval.sup_value, report.theta_hat));
        }
    }
    let (epsilon_star_estimate, best_theta) = best.expect("at least one start");
    Ok(IntrinsicReport {
        epsilon_star_estimate,
        best_theta,
        per_start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::OutputSpace;
    use crate::lgss::LgssParams;
    use crate::policies::PolicyKind;
    use nalgebra::{DMatrix, DVector};

    fn lgss_truth() -> ModelParams {
        ModelParams::Lgss(LgssParams {
            a: DMatrix::from_row_slice(2, 2, &[0.7, 0.1, 0.0, 0.5]),
            b: DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, -0.3]),
            q: DMatrix::from_row_slice(2, 2, &[0.05, 0.0, 0.0, 0.05]),
            r: DMatrix::from_row_slice(1, 1, &[0.1]),
            mu0: DVector::zeros(2),
            sigma0: DMatrix::identity(2, 2) * 0.3,
        })
    }

    fn cont_domain(horizon: usize) -> ExperimentalDomain {
        ExperimentalDomain {
            input_dim: 1,
            output_dim: 1,
            input_bounds: vec![(-1.5, 1.5)],
            output_space: OutputSpace::Continuous { dim: 1 },
            horizon,
            policy_family_ids: vec![],
        }
    }

    fn disc_domain(size: usize, horizon: usize) -> ExperimentalDomain {
        ExperimentalDomain {
            input_dim: 1,
            output_dim: 1,
            input_bounds: vec![(0.0, 1.0)],
            output_space: OutputSpace::Discrete { size },
            horizon,
            policy_family_ids: vec![],
        }
    }

    fn pol(id: &str, kind: PolicyKind) -> PerturbationPolicy {
        PerturbationPolicy {
            id: id.into(),
            kind,
        }
    }

    fn zero_policy() -> PerturbationPolicy {
        pol("zero", PolicyKind::Constant { amplitude: 0.0 })
    }

    fn prbs_policy() -> PerturbationPolicy {
        pol(
            "prbs",
            PolicyKind::Prbs {
                amplitude: 1.0,
                switch_prob: 0.4,
            },
        )
    }

    #[test]
    fn truth_vs_itself_exact_is_zero() {
        let truth = lgss_truth();
        let rep = equivalence_test(
            &truth,
            &truth,
            &[zero_policy(), prbs_policy()],
            &cont_domain(10),
            1e-9,
            1,
            4,
        )
        .unwrap();
        assert!(rep.sup_value < 1e-10);
        assert!(rep.pass);
        assert_eq!(rep.replicates_per_policy, 0);
        assert!(rep
            .per_policy
            .iter()
            .all(|e| e.kind == DiscrepancyKind::GaussianW2));
        let max = rep
            .per_policy
            .iter()
            .map(|e| e.value)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rep.sup_value, max);
    }

    #[test]
    fn doubled_b_invisible_under_zero_input() {
        let truth = lgss_truth();
        let doubled = match &truth {
            ModelParams::Lgss(p) => {
                let mut q = p.clone();
                q.b *= 2.0;
                ModelParams::Lgss(q)
            }
            _ => unreachable!(),
        };
        let dom = cont_domain(10);
        let rep =
            equivalence_test(&truth, &doubled, &[zero_policy()], &dom, 1e-9, 1, 4).unwrap();
        assert!(rep.sup_value < 1e-10);
        assert!(rep.pass);

        let rep2 =
            equivalence_test(&truth, &doubled, &[prbs_policy()], &dom, 1e-3, 1, 4).unwrap();
        assert!(rep2.sup_value > 1e-3, "sup {}", rep2.sup_value);
        assert!(!rep2.pass);
    }

    #[test]
    fn duplicate_policy_ids_rejected() {
        let truth = lgss_truth();
        let err = equivalence_test(
            &truth,
            &truth,
            &[zero_policy(), zero_policy()],
            &cont_domain(5),
            1.0,
            1,
            0,
        );
        assert!(matches!(err, Err(Error::SplitViolation(_))));
    }

    #[test]
    fn sampled_mode_enforces_min_reps() {
        let truth = lgss_truth();
        let err = equivalence_test_sampled(
            &truth,
            &truth,
            &[prbs_policy()],
            &cont_domain(5),
            1.0,
            5,
            0,
        );
        assert!(matches!(err, Err(Error::InsufficientReplicates(_))));
    }

    #[test]
    fn sup_is_monotone_in_policy_set() {
        let truth = lgss_truth();
        let model = match &truth {
            ModelParams::Lgss(p) => {
                let mut q = p.clone();
                q.a[(0, 0)] += 0.05;
                ModelParams::Lgss(q)
            }
            _ => unreachable!(),
        };
        let dom = cont_domain(8);
        let small = equivalence_test(&truth, &model, &[zero_policy()], &dom, 1.0, 1, 9).unwrap();
        let big = equivalence_test(
            &truth,
            &model,
            &[zero_policy(), prbs_policy()],
            &dom,
            1.0,
            1,
            9,
        )
        .unwrap();
        assert!(big.sup_value >= small.sup_value);
        // Shared policies evaluate identically: the sequence seed is keyed
        // by position, and "zero" sits at index 0 both times.
        assert_eq!(small.per_policy[0].value, big.per_policy[0].value);
    }

    #[test]
    fn calibration_rejects_exact_capable_truth() {
        let truth = lgss_truth();
        let err = calibrate_delta(
            &truth,
            &[prbs_policy()],
            &cont_domain(5),
            30,
            10,
            0.95,
            1,
        );
        assert!(matches!(err, Err(Error::CalibrationUnnecessary(_))));
    }

    fn big_iohmm() -> (ModelParams, ExperimentalDomain) {
        let mut rng = crate::seeds::rng_from(12);
        let p = iohmm::random_params(2, 2, 2, &mut rng);
        // 2^25 output sequences: far past the enumeration budget.
        (ModelParams::Iohmm(p), disc_domain(2, 24))
    }

    #[test]
    fn calibrated_delta_is_deterministic_and_accepts_truth() {
        let (truth, dom) = big_iohmm();
        let policies = [
            pol("sw", PolicyKind::Prbs {
                amplitude: 1.0,
                switch_prob: 0.3,
            }),
            pol("hold", PolicyKind::Constant { amplitude: 1.0 }),
        ];
        let d1 = calibrate_delta(&truth, &policies, &dom, 25, 30, 0.9, 7).unwrap();
        let d2 = calibrate_delta(&truth, &policies, &dom, 25, 30, 0.9, 7).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 > 0.0);
        let rep = equivalence_test(&truth, &truth, &policies, &dom, d1, 25, 99).unwrap();
        assert_eq!(rep.replicates_per_policy, 25);
        assert!(rep
            .per_policy
            .iter()
            .all(|e| e.kind == DiscrepancyKind::Energy));
    }

    #[test]
    fn noiseless_truth_calibrates_to_zero() {
        let truth = ModelParams::Lgss(LgssParams {
            a: DMatrix::from_row_slice(1, 1, &[0.5]),
            b: DMatrix::from_row_slice(1, 1, &[1.0]),
            c: DMatrix::from_row_slice(1, 1, &[1.0]),
            q: DMatrix::zeros(1, 1),
            r: DMatrix::zeros(1, 1),
            mu0: DVector::zeros(1),
            sigma0: DMatrix::zeros(1, 1),
        });
        let delta = calibrate_delta_sampled(
            &truth,
            &[pol("hold", PolicyKind::Constant { amplitude: 0.8 })],
            &cont_domain(6),
            20,
            15,
            0.95,
            3,
        )
        .unwrap();
        assert!(delta < 1e-8, "noiseless delta {delta}");
    }

    #[test]
    fn invalid_quantile_rejected() {
        let (truth, dom) = big_iohmm();
        for q in [0.5, 1.0, 0.2] {
            let err = calibrate_delta(&truth, &[prbs_policy()], &dom, 25, 5, q, 1);
            assert!(matches!(err, Err(Error::Config(_))), "quantile {q}");
        }
    }

    #[test]
    fn intrinsic_error_singleton_truth_is_zero() {
        let truth = lgss_truth();
        let opts = IntrinsicOptions {
            n_train: 12,
            reps: 25,
            fit: FitOptions {
                max_iter: 0,
                ..FitOptions::default()
            },
            starts: Some(vec![truth.clone()]),
            force_sampled: false,
        };
        let rep = intrinsic_error(
            &truth.class(),
            &truth,
            &[prbs_policy()],
            &[pol("step", PolicyKind::Step { amplitude: 1.0, step_time: 3 })],
            &cont_domain(8),
            1,
            &opts,
            5,
        )
        .unwrap();
        // max_iter 0 returns the start untouched; exact laws match exactly.
        assert!(rep.epsilon_star_estimate < 1e-12);
        assert_eq!(rep.per_start.len(), 1);
    }

    #[test]
    fn intrinsic_error_nonincreasing_in_budget() {
        let truth = lgss_truth();
        let opts = IntrinsicOptions {
            n_train: 30,
            reps: 25,
            fit: FitOptions {
                max_iter: 25,
                ..FitOptions::default()
            },
            starts: None,
            force_sampled: false,
        };
        let test_pols = [pol("step", PolicyKind::Step { amplitude: 1.0, step_time: 4 })];
        let dom = cont_domain(10);
        let cls = truth.class();
        let e1 = intrinsic_error(&cls, &truth, &[prbs_policy()], &test_pols, &dom, 1, &opts, 6)
            .unwrap();
        let e3 = intrinsic_error(&cls, &truth, &[prbs_policy()], &test_pols, &dom, 3, &opts, 6)
            .unwrap();
        assert!(e3.epsilon_star_estimate <= e1.epsilon_star_estimate + 1e-15);
        assert_eq!(e3.per_start[0], e1.per_start[0]);
        assert_eq!(
            e3.epsilon_star_estimate,
            e3.per_start.iter().fold(f64::INFINITY, |a, &v| a.min(v))
        );
    }

    #[test]
    fn report_round_trips_json() {
        let truth = lgss_truth();
        let rep = equivalence_test(
            &truth,
            &truth,
            &[zero_policy()],
            &cont_domain(4),
            0.5,
            1,
            2,
        )
        .unwrap();
        let s = serde_json::to_string(&rep).unwrap();
        let back: EquivalenceReport = serde_json::from_str(&s).unwrap();
        assert_eq!(rep, back);
    }
}
