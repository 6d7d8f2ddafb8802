//! Discriminatory power Δ over finite candidate model sets, optimal
//! policy-family selection, and a greedy adaptive design loop.
//!
//! Δ is an inf over model pairs of a sup over policies; both sets are
//! finite here, so the extrema are plain min/max with first-index
//! tie-breaking and every value is auditable in the report matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ExperimentalDomain, PerturbationSequence};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::policies::{self, PerturbationPolicy};
use crate::seeds;

/// Replicates per side when a model pair has no exact law and falls back
/// to sampled energy distance.
const SAMPLED_REPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    /// Model indices, lexicographic, i < j.
    pub pair: (usize, usize),
    /// One discrepancy per policy, in policy order.
    pub per_policy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationReport {
    pub delta_value: f64,
    pub witness_pair: (usize, usize),
    pub witness_policy: String,
    pub full_matrix: Vec<PairRow>,
    /// Δ > 0: some policy separates every pair.
    pub informative: bool,
}

fn check_models(models: &[ModelParams]) -> Result<()> {
    if models.len() < 2 {
        return Err(Error::VacuousInf(format!(
            "discriminatory power needs at least two models, got {}",
            models.len()
        )));
    }
    let space = models[0].output_space();
    for (i, m) in models.iter().enumerate() {
        m.validate()?;
        if m.output_space() != space {
            return Err(Error::HeterogeneousDataset(format!(
                "model {i} emits into a different output space than model 0"
            )));
        }
    }
    Ok(())
}

fn policy_sequences(
    policies: &[PerturbationPolicy],
    domain: &ExperimentalDomain,
    seed: u64,
) -> Result<Vec<PerturbationSequence>> {
    policies
        .iter()
        .enumerate()
        .map(|(i, p)| {
            policies::generate_open_loop(
                p,
                domain.horizon,
                domain.input_dim,
                seeds::derive_seed(seed, "inf_seq", i as u64),
                &domain.input_bounds,
            )
        })
        .collect()
}

/// Discrepancy between two models on one sequence: exact law distance
/// where both admit laws, else sampled energy distance.
fn pair_policy_distance(
    a: &ModelParams,
    b: &ModelParams,
    seq: &PerturbationSequence,
    domain: &ExperimentalDomain,
    draw_seed: u64,
) -> Result<f64> {
    let exact = crate::equivalence::exact_capable(a, domain)
        && crate::equivalence::exact_capable(b, domain)
        && a.is_discrete() == b.is_discrete();
    if exact {
        Ok(model::law_distance(&a.exact_law(seq)?, &b.exact_law(seq)?)?.value)
    } else {
        let space = a.output_space();
        let draw = |m: &ModelParams, base: u64| -> Result<Vec<nalgebra::DVector<f64>>> {
            (0..SAMPLED_REPS)
                .map(|j| {
                    let rec = m.simulate(seq, seeds::derive_seed(base, "rep", j as u64))?;
                    model::embed_outputs(&rec.outputs, &space)
                })
                .collect()
        };
        let xs = draw(a, seeds::derive_seed(draw_seed, "left", 0))?;
        let ys = draw(b, seeds::derive_seed(draw_seed, "right", 0))?;
        Ok(crate::discrepancy::energy_distance(&xs, &ys)?.value)
    }
}

fn distance_matrix(
    models: &[ModelParams],
    sequences: &[PerturbationSequence],
    domain: &ExperimentalDomain,
    seed: u64,
) -> Result<Vec<PairRow>> {
    let pairs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|i| ((i + 1)..models.len()).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .enumerate()
        .map(|(pi, &(i, j))| {
            let per_policy = sequences
                .iter()
                .enumerate()
                .map(|(s, seq)| {
                    let draw_seed =
                        seeds::derive_seed(seed, "inf_draw", (pi * sequences.len() + s) as u64);
                    pair_policy_distance(&models[i], &models[j], seq, domain, draw_seed)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(PairRow {
                pair: (i, j),
                per_policy,
            })
        })
        .collect()
}

fn assemble_report(
    matrix: Vec<PairRow>,
    policies: &[PerturbationPolicy],
) -> DiscriminationReport {
    let mut delta_value = f64::INFINITY;
    let mut witness_pair = matrix[0].pair;
    let mut witness_policy_idx = 0usize;
    for row in &matrix {
        let (best_idx, best_val) = row
            .per_policy
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        if best_val < delta_value {
            delta_value = best_val;
            witness_pair = row.pair;
            witness_policy_idx = best_idx;
        }
    }
    DiscriminationReport {
        delta_value,
        witness_pair,
        witness_policy: policies[witness_policy_idx].id.clone(),
        full_matrix: matrix,
        informative: delta_value > 0.0,
    }
}

/// Δ over a finite model set and policy set: for every model pair the best
/// separating policy, then the worst pair. The witness fields name the
/// extremal pair and policy (first index on ties).
pub fn discriminatory_power(
    models: &[ModelParams],
    policies: &[PerturbationPolicy],
    domain: &ExperimentalDomain,
    seed: u64,
) -> Result<DiscriminationReport> {
    check_models(models)?;
    if policies.is_empty() {
        return Err(Error::Config("discriminatory power needs at least one policy".into()));
    }
    let sequences = policy_sequences(policies, domain, seed)?;
    let matrix = distance_matrix(models, &sequences, domain, seed)?;
    Ok(assemble_report(matrix, policies))
}

/// Evaluate Δ per candidate family and keep the argmax (first index on
/// ties).
pub fn select_optimal_family(
    models: &[ModelParams],
    candidate_families: &[Vec<PerturbationPolicy>],
    domain: &ExperimentalDomain,
    seed: u64,
) -> Result<(usize, DiscriminationReport)> {
    if candidate_families.is_empty() {
        return Err(Error::Config("no candidate families supplied".into()));
    }
    let mut best: Option<(usize, DiscriminationReport)> = None;
    for (idx, family) in candidate_families.iter().enumerate() {
        let report = discriminatory_power(models, family, domain, seed)?;
        let better = match &best {
            None => true,
            Some((_, b)) => report.delta_value > b.delta_value,
        };
        if better {
            best = Some((idx, report));
        }
    }
    Ok(best.expect("at least one family"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    /// Chosen policy ids, in selection order.
    pub selected: Vec<String>,
    /// True when the budget ran out with unseparated pairs left (or no
    /// policy can separate them at all).
    pub inseparable: bool,
    pub separated_pairs: usize,
    pub total_pairs: usize,
}

/// Greedy adaptive design: repeatedly pick the policy with the best worst
/// case over still-unseparated model pairs; a pair counts as separated
/// once some chosen policy pushes its discrepancy past tau. Stops early
/// when everything is separated. tau is normally a calibrated δ.
pub fn greedy_adaptive_design(
    models: &[ModelParams],
    policy_pool: &[PerturbationPolicy],
    horizon_budget: usize,
    domain: &ExperimentalDomain,
    tau: f64,
    seed: u64,
) -> Result<DesignReport> {
    check_models(models)?;
    if policy_pool.is_empty() {
        return Err(Error::Config("empty policy pool".into()));
    }
    if horizon_budget > policy_pool.len() {
        return Err(Error::BudgetExceedsPool(format!(
            "budget {horizon_budget} exceeds pool of {}",
            policy_pool.len()
        )));
    }
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("tau must be nonnegative, got {tau}")));
    }
    let sequences = policy_sequences(policy_pool, domain, seed)?;
    let matrix = distance_matrix(models, &sequences, domain, seed)?;
    let total_pairs = matrix.len();

    let mut unseparated: Vec<usize> = (0..total_pairs).collect();
    let mut available: Vec<usize> = (0..policy_pool.len()).collect();
    let mut selected = Vec::new();
    while selected.len() < horizon_budget && !unseparated.is_empty() && !available.is_empty() {
        // Best worst case: maximize over available policies the minimum
        // discrepancy across unseparated pairs; first index wins ties.
        let mut best_pos = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (pos, &p) in available.iter().enumerate() {
            let score = unseparated
                .iter()
                .map(|&row| matrix[row].per_policy[p])
                .fold(f64::INFINITY, f64::min);
            if score > best_score {
                best_score = score;
                best_pos = pos;
            }
        }
        let chosen = available.remove(best_pos);
        selected.push(policy_pool[chosen].id.clone());
        unseparated.retain(|&row| matrix[row].per_policy[chosen] <= tau);
    }
    Ok(DesignReport {
        inseparable: !unseparated.is_empty(),
        separated_pairs: total_pairs - unseparated.len(),
        selected,
        total_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::OutputSpace;
    use crate::lgss::LgssParams;
    use crate::policies::PolicyKind;
    use nalgebra::{DMatrix, DVector};

    fn base_lgss() -> LgssParams {
        LgssParams {
            a: DMatrix::from_row_slice(2, 2, &[0.7, 0.1, 0.0, 0.5]),
            b: DMatrix::from_row_slice(2, 1, &[1.0, 0.4]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, -0.5]),
            q: DMatrix::identity(2, 2) * 0.05,
            r: DMatrix::from_row_slice(1, 1, &[0.1]),
            mu0: DVector::zeros(2),
            sigma0: DMatrix::identity(2, 2) * 0.2,
        }
    }

    fn b_differing_pair() -> Vec<ModelParams> {
        let m1 = base_lgss();
        let mut m2 = base_lgss();
        m2.b *= 2.0;
        vec![ModelParams::Lgss(m1), ModelParams::Lgss(m2)]
    }

    fn dom(horizon: usize) -> ExperimentalDomain {
        ExperimentalDomain {
            input_dim: 1,
            output_dim: 1,
            input_bounds: vec![(-1.5, 1.5)],
            output_space: OutputSpace::Continuous { dim: 1 },
            horizon,
            policy_family_ids: vec![],
        }
    }

    fn pol(id: &str, kind: PolicyKind) -> PerturbationPolicy {
        PerturbationPolicy { id: id.into(), kind }
    }

    fn zero_pol() -> PerturbationPolicy {
        pol("zero", PolicyKind::Constant { amplitude: 0.0 })
    }

    fn prbs_pol() -> PerturbationPolicy {
        pol(
            "prbs",
            PolicyKind::Prbs {
                amplitude: 1.0,
                switch_prob: 0.4,
            },
        )
    }

    #[test]
    fn zero_input_hides_b() {
        let models = b_differing_pair();
        let rep = discriminatory_power(&models, &[zero_pol()], &dom(10), 3).unwrap();
        assert!(rep.delta_value < 1e-10);
        assert!(!rep.informative);
        for row in &rep.full_matrix {
            for v in &row.per_policy {
                assert!(*v < 1e-10);
            }
        }
    }

    #[test]
    fn prbs_separates_b_pair() {
        let models = b_differing_pair();
        let rep =
            discriminatory_power(&models, &[zero_pol(), prbs_pol()], &dom(10), 3).unwrap();
        assert!(rep.delta_value > 0.0);
        assert!(rep.informative);
        assert_eq!(rep.witness_policy, "prbs");
        assert_eq!(rep.witness_pair, (0, 1));
    }

    #[test]
    fn single_model_is_vacuous() {
        let models = vec![ModelParams::Lgss(base_lgss())];
        assert!(matches!(
            discriminatory_power(&models, &[zero_pol()], &dom(5), 0),
            Err(Error::VacuousInf(_))
        ));
    }

    #[test]
    fn delta_monotone_in_policy_and_model_sets() {
        let mut models = b_differing_pair();
        let small = discriminatory_power(&models, &[zero_pol()], &dom(8), 5).unwrap();
        let big =
            discriminatory_power(&models, &[zero_pol(), prbs_pol()], &dom(8), 5).unwrap();
        assert!(big.delta_value >= small.delta_value - 1e-12);

        // A third model identical to model 0 forces a zero pair.
        models.push(models[0].clone());
        let extended =
            discriminatory_power(&models, &[zero_pol(), prbs_pol()], &dom(8), 5).unwrap();
        assert!(extended.delta_value <= big.delta_value + 1e-12);
        assert!(extended.delta_value < 1e-10);
    }

    #[test]
    fn report_is_bit_reproducible() {
        let models = b_differing_pair();
        let pols = [zero_pol(), prbs_pol()];
        let a = discriminatory_power(&models, &pols, &dom(8), 42).unwrap();
        let b = discriminatory_power(&models, &pols, &dom(8), 42).unwrap();
        assert_eq!(a, b);
        let s1 = serde_json::to_string(&a).unwrap();
        let s2 = serde_json::to_string(&b).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn family_selection_prefers_separating_family() {
        let models = b_differing_pair();
        let families = vec![vec![zero_pol()], vec![prbs_pol()]];
        let (idx, rep) = select_optimal_family(&models, &families, &dom(10), 7).unwrap();
        assert_eq!(idx, 1);
        assert!(rep.delta_value > 0.0);

        let dup = vec![vec![prbs_pol()], vec![prbs_pol()]];
        let (idx, _) = select_optimal_family(&models, &dup, &dom(10), 7).unwrap();
        assert_eq!(idx, 0);

        let single = vec![vec![zero_pol()]];
        let (idx, rep) = select_optimal_family(&models, &single, &dom(10), 7).unwrap();
        assert_eq!(idx, 0);
        assert!(rep.delta_value < 1e-10);
    }

    #[test]
    fn greedy_design_picks_separating_policy_first() {
        let models = b_differing_pair();
        let pool = [zero_pol(), prbs_pol()];
        let rep = greedy_adaptive_design(&models, &pool, 1, &dom(10), 1e-4, 11).unwrap();
        assert_eq!(rep.selected, vec!["prbs".to_string()]);
        assert!(!rep.inseparable);
        assert_eq!(rep.separated_pairs, 1);
    }

    #[test]
    fn greedy_design_identical_models_inseparable() {
        let m = ModelParams::Lgss(base_lgss());
        let models = vec![m.clone(), m];
        let pool = [zero_pol(), prbs_pol()];
        let rep = greedy_adaptive_design(&models, &pool, 2, &dom(10), 1e-4, 11).unwrap();
        assert_eq!(
            rep.selected,
            vec!["zero".to_string(), "prbs".to_string()],
            "ties fall back to pool order"
        );
        assert!(rep.inseparable);
        assert_eq!(rep.separated_pairs, 0);
    }

    #[test]
    fn greedy_design_budget_checks() {
        let models = b_differing_pair();
        let pool = [zero_pol()];
        assert!(matches!(
            greedy_adaptive_design(&models, &pool, 2, &dom(5), 0.1, 0),
            Err(Error::BudgetExceedsPool(_))
        ));
        let rep = greedy_adaptive_design(&models, &pool, 1, &dom(5), 0.1, 0).unwrap();
        assert_eq!(rep.selected.len(), 1);
    }
}
