//! The estimation objective and the fit dispatcher: empirical loss with
//! optional ridge regularization, EM-based fitting for both model classes,
//! and a consistency probe tracking fitted-vs-truth law distance as the
//! dataset grows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrepancy::{self, Bandwidth, DiscrepancyKind};
use crate::domain::{Dataset, ExperimentalDomain, PerturbationSequence, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::iohmm::{self, BwOptions};
use crate::lgss::{self, EmFixed, EmOptions};
use crate::model::{self, ModelParams};
use crate::policies::{self, PerturbationPolicy};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    Ridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Nll,
    Distributional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub loss_mode: LossMode,
    /// Discrepancy applied per replicate group in distributional mode.
    /// Only the sample-based kinds make sense here.
    pub distributional_kind: DiscrepancyKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.0,
            regularizer: Regularizer::None,
            loss_mode: LossMode::Nll,
            distributional_kind: DiscrepancyKind::Energy,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Ridge penalty Ω(θ): squared entries of the dynamics and observation
/// matrices. Covariances are governed by floors, not penalties, and the
/// probability simplices of the discrete class leave nothing to shrink.
pub fn omega(theta: &ModelParams, regularizer: Regularizer) -> f64 {
    match regularizer {
        Regularizer::None => 0.0,
        Regularizer::Ridge => match theta {
            ModelParams::Lgss(p) => {
                p.a.iter().map(|v| v * v).sum::<f64>()
                    + p.b.iter().map(|v| v * v).sum::<f64>()
                    + p.c.iter().map(|v| v * v).sum::<f64>()
            }
            ModelParams::Iohmm(_) => 0.0,
        },
    }
}

/// Model-side replicate draws for one input sequence, seeded off the
/// sequence's own seed so the loss is a pure function of (θ, data, config).
fn model_draws(
    theta: &ModelParams,
    seq: &PerturbationSequence,
    count: usize,
) -> Result<Vec<TrajectoryRecord>> {
    (0..count)
        .map(|j| {
            let s = seeds::derive_seed(seq.seed, "loss_model_draw", j as u64);
            theta.simulate(seq, s)
        })
        .collect()
}

fn grouped_discrepancy(
    theta: &ModelParams,
    data: &Dataset,
    kind: DiscrepancyKind,
) -> Result<f64> {
    if data.groups.iter().all(|g| g.len() <= 1) {
        return Err(Error::SingletonGroups(
            "distributional loss needs replicate groups; every input sequence occurs once".into(),
        ));
    }
    let space = theta.output_space();
    let mut acc = 0.0;
    for group in &data.groups {
        let seq = &data.records[group[0]].inputs;
        let empirical = group
            .iter()
            .map(|&i| model::embed_outputs(&data.records[i].outputs, &space))
            .collect::<Result<Vec<_>>>()?;
        let simulated = model_draws(theta, seq, group.len())?
            .iter()
            .map(|r| model::embed_outputs(&r.outputs, &space))
            .collect::<Result<Vec<_>>>()?;
        let res = match kind {
            DiscrepancyKind::Energy => discrepancy::energy_distance(&empirical, &simulated)?,
            DiscrepancyKind::Mmd => {
                discrepancy::mmd2_biased(&empirical, &simulated, Bandwidth::Median)?
            }
            other => {
                return Err(Error::Config(format!(
                    "distributional loss needs a sample-based discrepancy, got {other:?}"
                )))
            }
        };
        acc += res.value;
    }
    Ok(acc / data.groups.len() as f64)
}

/// Empirical loss ℒ_N(θ). NLL mode averages −loglik over records;
/// distributional mode averages a sample discrepancy over replicate
/// groups. Both add λΩ(θ).
pub fn empirical_loss(theta: &ModelParams, data: &Dataset, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("loss over an empty dataset".into()));
    }
    let penalty = config.lambda * omega(theta, config.regularizer);
    match config.loss_mode {
        LossMode::Nll => {
            let lls = data
                .records
                .par_iter()
                .map(|r| theta.loglik(r))
                .collect::<Result<Vec<f64>>>()?;
            let mean = lls.iter().sum::<f64>() / lls.len() as f64;
            Ok(-mean + penalty)
        }
        LossMode::Distributional => {
            Ok(grouped_discrepancy(theta, data, config.distributional_kind)? + penalty)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Blocks held fixed during EM; ignored by the discrete class.
    pub fixed: EmFixed,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 200,
            tol: 1e-6,
            fixed: EmFixed::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub theta_hat: ModelParams,
    pub final_loss: f64,
    /// Loss value of the parameters entering each iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Loglik trace → loss trace: −ll/N plus the penalty of the parameters the
/// entry belongs to.
fn loss_trace(ll_trace: &[f64], n: usize, penalties: &[f64]) -> Vec<f64> {
    ll_trace
        .iter()
        .enumerate()
        .map(|(k, &ll)| -ll / n as f64 + penalties.get(k).copied().unwrap_or(0.0))
        .collect()
}

/// Maximum-likelihood fit via EM, dispatched on the class of `init`.
/// Ridge with λ>0 is realized as post-M-step proximal shrinkage of A, B, C
/// by 1/(1+λ); exact for λ=0, an approximation otherwise.
pub fn fit(
    init: &ModelParams,
    data: &Dataset,
    loss: &LossConfig,
    opts: &FitOptions,
) -> Result<FitReport> {
    loss.validate()?;
    if loss.loss_mode != LossMode::Nll {
        return Err(Error::Config(
            "the fit dispatcher optimizes NLL only; distributional losses are for validation".into(),
        ));
    }
    let n = data.len();
    let (theta_hat, ll_trace, penalties) = match init {
        ModelParams::Lgss(p) => {
            let em_opts = EmOptions {
                max_iter: opts.max_iter,
                tol: opts.tol,
                fixed: opts.fixed,
            };
            let shrinking = loss.regularizer == Regularizer::Ridge && loss.lambda > 0.0;
            if shrinking {
                let factor = 1.0 / (1.0 + loss.lambda);
                let omegas = std::sync::Mutex::new(vec![omega(init, Regularizer::Ridge)]);
                let hook = |params: &mut lgss::LgssParams| {
                    params.a *= factor;
                    params.b *= factor;
                    params.c *= factor;
                    let w = params.a.iter().map(|v| v * v).sum::<f64>()
                        + params.b.iter().map(|v| v * v).sum::<f64>()
                        + params.c.iter().map(|v| v * v).sum::<f64>();
                    omegas.lock().unwrap().push(w);
                };
                let (fitted, trace) = lgss::em_fit_with(p, data, &em_opts, Some(&hook))?;
                let pen: Vec<f64> = omegas
                    .into_inner()
                    .unwrap()
                    .into_iter()
                    .map(|w| loss.lambda * w)
                    .collect();
                (ModelParams::Lgss(fitted), trace, pen)
            } else {
                let (fitted, trace) = lgss::em_fit(p, data, &em_opts)?;
                (ModelParams::Lgss(fitted), trace, Vec::new())
            }
        }
        ModelParams::Iohmm(p) => {
            let bw_opts = BwOptions {
                max_iter: opts.max_iter,
                tol: opts.tol,
            };
            let (fitted, trace) = iohmm::baum_welch_fit(p, data, &bw_opts)?;
            (ModelParams::Iohmm(fitted), trace, Vec::new())
        }
    };
    let iterations = ll_trace.len();
    let converged = ll_trace.len() >= 2
        && (ll_trace[ll_trace.len() - 1] - ll_trace[ll_trace.len() - 2]).abs() < opts.tol;
    let final_loss = empirical_loss(&theta_hat, data, loss)?;
    Ok(FitReport {
        theta_hat,
        final_loss,
        trace: loss_trace(&ll_trace, n, &penalties),
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub n: usize,
    pub discrepancy: f64,
}

/// Deterministic probe inputs spanning the domain: a constant hold, a
/// mid-horizon step, and an alternating drive. Discrete domains probe the
/// extreme symbols and a toggle.
pub fn probe_sequences(domain: &ExperimentalDomain, discrete_inputs: Option<usize>) -> Vec<PerturbationSequence> {
    let t = domain.horizon;
    let m = domain.input_dim;
    let mk = |id: &str, f: &dyn Fn(usize, usize) -> f64| PerturbationSequence {
        values: nalgebra::DMatrix::from_fn(t, m, |row, col| f(row, col)),
        policy_id: id.to_string(),
        seed: 0,
    };
    match discrete_inputs {
        Some(u) => {
            let hi = (u - 1) as f64;
            let toggle = 1.0f64.min(hi);
            vec![
                mk("probe_low", &|_, _| 0.0),
                mk("probe_high", &move |_, _| hi),
                mk("probe_toggle", &move |row, _| {
                    if row % 2 == 0 {
                        0.0
                    } else {
                        toggle
                    }
                }),
            ]
        }
        None => {
            let bounds = domain.input_bounds.clone();
            let level = move |col: usize, frac: f64| {
                let (lo, hi) = bounds[col];
                0.5 * (lo + hi) + frac * (hi - lo)
            };
            let l1 = level.clone();
            let l2 = level.clone();
            vec![
                mk("probe_hold", &|_, col| l1(col, 0.25)),
                mk("probe_step", &|row, col| {
                    if row < t / 2 {
                        level(col, -0.25)
                    } else {
                        level(col, 0.25)
                    }
                }),
                mk("probe_toggle", &|row, col| {
                    let s = if row % 2 == 0 { 0.35 } else { -0.35 };
                    l2(col, s)
                }),
            ]
        }
    }
}

/// Sup over the probe set of the exact-law distance between two models.
pub fn sup_probe_distance(
    a: &ModelParams,
    b: &ModelParams,
    probes: &[PerturbationSequence],
) -> Result<f64> {
    let mut sup = 0.0f64;
    for seq in probes {
        let d = model::law_distance(&a.exact_law(seq)?, &b.exact_law(seq)?)?;
        sup = sup.max(d.value);
    }
    Ok(sup)
}

/// Fit at increasing dataset sizes and report how far the fitted law sits
/// from the truth, sup over the probe inputs. EM starts at the truth, so
/// the reported drift is what the data itself induces.
pub fn consistency_probe(
    truth: &ModelParams,
    policy: &PerturbationPolicy,
    domain: &ExperimentalDomain,
    ns: &[usize],
    seed: u64,
) -> Result<Vec<ConsistencyRow>> {
    truth.validate()?;
    let discrete_inputs = match truth {
        ModelParams::Iohmm(p) => Some(p.n_inputs()),
        ModelParams::Lgss(_) => None,
    };
    let probes = probe_sequences(domain, discrete_inputs);
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        if n == 0 {
            return Err(Error::EmptyDataset("consistency probe with N=0".into()));
        }
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let seq = policies::generate_open_loop(
                policy,
                domain.horizon,
                domain.input_dim,
                seeds::derive_seed(seed, "probe_input", i as u64),
                &domain.input_bounds,
            )?;
            records.push(truth.simulate(&seq, seeds::derive_seed(seed, "probe_record", i as u64))?);
        }
        let data = crate::domain::group_dataset(records)?;
        let report = fit(truth, &data, &LossConfig::default(), &FitOptions::default())?;
        rows.push(ConsistencyRow {
            n,
            discrepancy: sup_probe_distance(&report.theta_hat, truth, &probes)?,
        });
    }
    Ok(rows)
}
