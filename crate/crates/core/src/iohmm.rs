//! Input-conditioned hidden Markov models: discrete latent states whose
//! transition matrix is selected per step by a finite input symbol,
//! discrete observations.
//!
//!   x_0 ~ π0,   x_{t+1} ~ T_{u_t}(x_t, ·),   y_t ~ E(x_t, ·)
//!
//! Perturbation values bridge to input symbols by rounding: the experimental
//! domain's input box is read as the integer range [0, U).

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Outputs, PerturbationSequence, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::linalg;
use crate::seeds;

/// Stochastic-matrix tolerance: row sums must be within 1e-12 of 1.
const ROW_SUM_TOL: f64 = 1e-12;

/// Probability floor applied after each M-step. Positive entries below the
/// floor are raised and the row renormalized; exact zeros are structural
/// (a transition the responsibilities never touched) and stay zero, which
/// keeps deterministic chains exact fixed points of Baum-Welch.
const PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct IoHmmParams {
    /// One row-stochastic S×S matrix per input symbol; entry (s, s') is
    /// P(x_{t+1}=s' | x_t=s, u_t=u).
    pub trans: Vec<DMatrix<f64>>,
    /// Row-stochastic S×O emission matrix; entry (s, o) is P(y=o | x=s).
    pub emit: DMatrix<f64>,
    /// Initial state distribution π0.
    pub init: DVector<f64>,
}

impl IoHmmParams {
    pub fn n_states(&self) -> usize {
        self.emit.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.trans.len()
    }

    pub fn n_obs(&self) -> usize {
        self.emit.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_states();
        if s == 0 || self.n_inputs() == 0 || self.n_obs() == 0 {
            return Err(Error::DimensionMismatch(
                "S, U, O must all be positive".into(),
            ));
        }
        if self.init.len() != s {
            return Err(Error::DimensionMismatch(format!(
                "init has length {}, expected {s}",
                self.init.len()
            )));
        }
        for (u, t) in self.trans.iter().enumerate() {
            if t.nrows() != s || t.ncols() != s {
                return Err(Error::DimensionMismatch(format!(
                    "transition matrix {u} is {}×{}, expected {s}×{s}",
                    t.nrows(),
                    t.ncols()
                )));
            }
            for row in 0..s {
                check_prob_row(t.row(row).iter(), &format!("T_{u} row {row}"))?;
            }
        }
        for row in 0..s {
            check_prob_row(self.emit.row(row).iter(), &format!("emit row {row}"))?;
        }
        check_prob_row(self.init.iter(), "init")?;
        Ok(())
    }

    /// Relabel hidden states by `perm` (state i becomes perm[i]). The
    /// output law is invariant under this map.
    pub fn permute_states(&self, perm: &[usize]) -> IoHmmParams {
        let s = self.n_states();
        let mut out = self.clone();
        for (u, t) in self.trans.iter().enumerate() {
            for i in 0..s {
                for j in 0..s {
                    out.trans[u][(perm[i], perm[j])] = t[(i, j)];
                }
            }
        }
        for i in 0..s {
            out.init[perm[i]] = self.init[i];
            for o in 0..self.n_obs() {
                out.emit[(perm[i], o)] = self.emit[(i, o)];
            }
        }
        out
    }
}

fn check_prob_row<'a>(row: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &v in row {
        if v < 0.0 {
            return Err(Error::NotPsd(format!("{what}: negative probability {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::NotPsd(format!("{what}: row sums to {sum}, not 1")));
    }
    Ok(())
}

// JSON schema: {"S":2,"U":2,"O":3,"trans":[[[..],[..]],[[..],[..]]],
//               "emit":[[..],[..]],"init":[..]} with row-major tables.
#[derive(Serialize, Deserialize)]
struct IoHmmRepr {
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "U")]
    u: usize,
    #[serde(rename = "O")]
    o: usize,
    trans: Vec<Vec<Vec<f64>>>,
    emit: Vec<Vec<f64>>,
    init: Vec<f64>,
}

impl Serialize for IoHmmParams {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        IoHmmRepr {
            s: self.n_states(),
            u: self.n_inputs(),
            o: self.n_obs(),
            trans: self.trans.iter().map(linalg::to_rows).collect(),
            emit: linalg::to_rows(&self.emit),
            init: self.init.iter().copied().collect(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for IoHmmParams {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = IoHmmRepr::deserialize(de)?;
        let trans = repr
            .trans
            .iter()
            .enumerate()
            .map(|(u, t)| linalg::from_rows(t, &format!("trans[{u}]")))
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        let params = IoHmmParams {
            trans,
            emit: linalg::from_rows(&repr.emit, "emit").map_err(D::Error::custom)?,
            init: DVector::from_vec(repr.init),
        };
        if (params.n_states(), params.n_inputs(), params.n_obs()) != (repr.s, repr.u, repr.o) {
            return Err(D::Error::custom(format!(
                "declared dims ({},{},{}) disagree with tables ({},{},{})",
                repr.s,
                repr.u,
                repr.o,
                params.n_states(),
                params.n_inputs(),
                params.n_obs()
            )));
        }
        params.validate().map_err(D::Error::custom)?;
        Ok(params)
    }
}

/// Uniformly random stochastic parameters, for initialization and tests.
pub fn random_params(s: usize, u: usize, o: usize, rng: &mut seeds::Rng) -> IoHmmParams {
    let mut random_row = |len: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..len).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    };
    let trans = (0..u)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..s).map(|_| random_row(s)).collect();
            linalg::from_rows(&rows, "trans").expect("rectangular by construction")
        })
        .collect();
    let emit_rows: Vec<Vec<f64>> = (0..s).map(|_| random_row(o)).collect();
    let emit = linalg::from_rows(&emit_rows, "emit").expect("rectangular by construction");
    let init = DVector::from_vec(random_row(s));
    IoHmmParams { trans, emit, init }
}

/// Map real-valued perturbation values to input symbols by rounding.
/// Requires single-channel inputs; rounded values must land in [0, U).
/// Round one real input value to its symbol.
pub fn symbol_from_value(v: f64, n_inputs: usize) -> Result<usize> {
    let k = v.round();
    if !v.is_finite() || k < 0.0 || k >= n_inputs as f64 {
        return Err(Error::InvalidSymbol(format!(
            "input value {v} rounds outside [0, {n_inputs})"
        )));
    }
    Ok(k as usize)
}

pub fn symbols_from_sequence(u: &PerturbationSequence, n_inputs: usize) -> Result<Vec<usize>> {
    if u.input_dim() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "discrete inputs must be single-channel, got dim {}",
            u.input_dim()
        )));
    }
    let mut out = Vec::with_capacity(u.horizon());
    for t in 0..u.horizon() {
        out.push(symbol_from_value(u.values[(t, 0)], n_inputs).map_err(|_| {
            Error::InvalidSymbol(format!(
                "input value {} at step {t} rounds outside [0, {n_inputs})",
                u.values[(t, 0)]
            ))
        })?);
    }
    Ok(out)
}

/// Store an input symbol sequence as a perturbation sequence (T×1 reals).
pub fn sequence_from_symbols(u: &[usize], policy_id: &str, seed: u64) -> PerturbationSequence {
    PerturbationSequence {
        values: DMatrix::from_fn(u.len(), 1, |t, _| u[t] as f64),
        policy_id: policy_id.to_string(),
        seed,
    }
}

fn check_symbols(syms: &[usize], alphabet: usize, what: &str) -> Result<()> {
    for (t, &s) in syms.iter().enumerate() {
        if s >= alphabet {
            return Err(Error::InvalidSymbol(format!(
                "{what} symbol {s} at step {t} out of range [0, {alphabet})"
            )));
        }
    }
    Ok(())
}

fn sample_categorical(rng: &mut seeds::Rng, probs: impl Iterator<Item = f64>, len: usize) -> usize {
    let roll: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.enumerate() {
        acc += p;
        if roll < acc {
            return i;
        }
    }
    len - 1
}

/// Stepping simulator with the same draw-order contract as the LGSS one:
/// x_0 at construction, then per step y_t before the transition draw.
pub struct IoHmmSim {
    params: IoHmmParams,
    x: usize,
    rng: seeds::Rng,
}

impl IoHmmSim {
    pub fn new(params: &IoHmmParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = seeds::rng_from(seed);
        let s = params.n_states();
        let x = sample_categorical(&mut rng, params.init.iter().copied(), s);
        Ok(IoHmmSim {
            params: params.clone(),
            x,
            rng,
        })
    }

    /// Sample y_t ~ E(x_t, ·).
    pub fn emit(&mut self) -> usize {
        let o = self.params.n_obs();
        sample_categorical(
            &mut self.rng,
            self.params.emit.row(self.x).iter().copied(),
            o,
        )
    }

    /// Advance x_{t+1} ~ T_{u_t}(x_t, ·).
    pub fn step(&mut self, u: usize) -> Result<()> {
        if u >= self.params.n_inputs() {
            return Err(Error::InvalidSymbol(format!(
                "input symbol {u} out of range [0, {})",
                self.params.n_inputs()
            )));
        }
        let s = self.params.n_states();
        self.x = sample_categorical(
            &mut self.rng,
            self.params.trans[u].row(self.x).iter().copied(),
            s,
        );
        Ok(())
    }
}

/// Simulate one trajectory under a perturbation sequence read as symbols.
pub fn simulate(
    params: &IoHmmParams,
    u: &PerturbationSequence,
    seed: u64,
) -> Result<TrajectoryRecord> {
    let syms = symbols_from_sequence(u, params.n_inputs())?;
    let mut sim = IoHmmSim::new(params, seed)?;
    let mut y = Vec::with_capacity(syms.len() + 1);
    for &ut in &syms {
        y.push(sim.emit());
        sim.step(ut)?;
    }
    y.push(sim.emit());
    Ok(TrajectoryRecord {
        inputs: u.clone(),
        outputs: Outputs::Discrete(y),
        truth_tag: None,
        seed,
    })
}

/// log P(y_{0:T} | u, θ) by the scaled forward recursion; underflow-safe
/// for horizons up to at least 10^4.
pub fn forward_loglik(params: &IoHmmParams, u: &[usize], y: &[usize]) -> Result<f64> {
    params.validate()?;
    check_lengths(u, y)?;
    check_symbols(u, params.n_inputs(), "input")?;
    check_symbols(y, params.n_obs(), "output")?;
    let s = params.n_states();

    let mut alpha: Vec<f64> = (0..s).map(|i| params.init[i] * params.emit[(i, y[0])]).collect();
    let mut loglik = normalize_in_place(&mut alpha, 0)?;
    for t in 0..u.len() {
        let trans = &params.trans[u[t]];
        let mut next = vec![0.0; s];
        for (i, &a) in alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for j in 0..s {
                next[j] += a * trans[(i, j)];
            }
        }
        for (j, v) in next.iter_mut().enumerate() {
            *v *= params.emit[(j, y[t + 1])];
        }
        loglik += normalize_in_place(&mut next, t + 1)?;
        alpha = next;
    }
    Ok(loglik)
}

fn check_lengths(u: &[usize], y: &[usize]) -> Result<()> {
    if y.len() != u.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "outputs have {} samples, expected {} for {} input steps",
            y.len(),
            u.len() + 1,
            u.len()
        )));
    }
    Ok(())
}

fn normalize_in_place(v: &mut [f64], t: usize) -> Result<f64> {
    let c: f64 = v.iter().sum();
    if c <= 0.0 {
        return Err(Error::NumericalFailure(format!(
            "forward scale vanished at step {t}: the observed symbol has probability 0"
        )));
    }
    for x in v.iter_mut() {
        *x /= c;
    }
    Ok(c.ln())
}

/// Index of an output sequence in the exhaustive law, y_0 most significant.
pub fn sequence_index(y: &[usize], n_obs: usize) -> usize {
    y.iter().fold(0, |acc, &s| acc * n_obs + s)
}

/// Inverse of [`sequence_index`].
pub fn index_sequence(mut idx: usize, n_obs: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for t in (0..len).rev() {
        out[t] = idx % n_obs;
        idx /= n_obs;
    }
    out
}

/// Enumeration budget for exhaustive laws.
pub const EXHAUSTIVE_BUDGET: usize = 1_000_000;

/// Whether O^steps output sequences fit the enumeration budget.
pub fn exhaustive_feasible(n_obs: usize, steps: usize) -> bool {
    n_obs
        .checked_pow(steps as u32)
        .is_some_and(|n| n <= EXHAUSTIVE_BUDGET)
}

/// Exact output law: P(y_{0:T} | u) for every one of the O^{T+1} sequences.
/// Entries sum to 1; feasible while O^{T+1} ≤ 10^6.
pub fn exhaustive_law(params: &IoHmmParams, u: &[usize]) -> Result<Vec<f64>> {
    params.validate()?;
    check_symbols(u, params.n_inputs(), "input")?;
    let o = params.n_obs();
    let steps = u.len() + 1;
    let total = o
        .checked_pow(steps as u32)
        .filter(|&n| n <= EXHAUSTIVE_BUDGET)
        .ok_or_else(|| {
            Error::ExhaustiveInfeasible(format!(
                "{o}^{steps} output sequences exceed the 10^6 enumeration budget"
            ))
        })?;
    let mut out = vec![0.0; total];
    let alpha: Vec<f64> = params.init.iter().copied().collect();
    extend_law(params, u, 0, &alpha, 0, &mut out);
    Ok(out)
}

/// Depth-first prefix walk: `alpha[s]` is P(x_t = s, y_{0:t-1} = prefix).
fn extend_law(
    params: &IoHmmParams,
    u: &[usize],
    t: usize,
    alpha: &[f64],
    idx: usize,
    out: &mut [f64],
) {
    let s = params.n_states();
    let o = params.n_obs();
    for yt in 0..o {
        let weighted: Vec<f64> = (0..s).map(|i| alpha[i] * params.emit[(i, yt)]).collect();
        let child = idx * o + yt;
        if t == u.len() {
            out[child] = weighted.iter().sum();
        } else {
            let trans = &params.trans[u[t]];
            let mut next = vec![0.0; s];
            for (i, &w) in weighted.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for j in 0..s {
                    next[j] += w * trans[(i, j)];
                }
            }
            extend_law(params, u, t + 1, &next, child, out);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BwOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for BwOptions {
    fn default() -> Self {
        BwOptions {
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

/// Per-record responsibilities summed into reusable accumulators.
struct BwStats {
    pi_acc: DVector<f64>,
    trans_num: Vec<DMatrix<f64>>,
    trans_den: Vec<DVector<f64>>,
    emit_num: DMatrix<f64>,
    emit_den: DVector<f64>,
    loglik: f64,
}

fn record_responsibilities(params: &IoHmmParams, u: &[usize], y: &[usize]) -> Result<BwStats> {
    let s = params.n_states();
    let steps = y.len();

    // Scaled forward.
    let mut alpha = vec![vec![0.0; s]; steps];
    let mut logc = vec![0.0; steps];
    for i in 0..s {
        alpha[0][i] = params.init[i] * params.emit[(i, y[0])];
    }
    logc[0] = normalize_in_place(&mut alpha[0], 0)?;
    let mut scales = vec![0.0; steps];
    scales[0] = logc[0].exp();
    for t in 0..u.len() {
        let trans = &params.trans[u[t]];
        let (head, tail) = alpha.split_at_mut(t + 1);
        let prev = &head[t];
        let next = &mut tail[0];
        for (i, &a) in prev.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for j in 0..s {
                next[j] += a * trans[(i, j)];
            }
        }
        for (j, v) in next.iter_mut().enumerate() {
            *v *= params.emit[(j, y[t + 1])];
        }
        logc[t + 1] = normalize_in_place(next, t + 1)?;
        scales[t + 1] = logc[t + 1].exp();
    }

    // Scaled backward.
    let mut beta = vec![vec![1.0; s]; steps];
    for t in (0..u.len()).rev() {
        let trans = &params.trans[u[t]];
        let mut row = vec![0.0; s];
        for i in 0..s {
            let mut acc = 0.0;
            for j in 0..s {
                acc += trans[(i, j)] * params.emit[(j, y[t + 1])] * beta[t + 1][j];
            }
            row[i] = acc / scales[t + 1];
        }
        beta[t] = row;
    }

    let mut st = BwStats {
        pi_acc: DVector::zeros(s),
        trans_num: vec![DMatrix::zeros(s, s); params.n_inputs()],
        trans_den: vec![DVector::zeros(s); params.n_inputs()],
        emit_num: DMatrix::zeros(s, params.n_obs()),
        emit_den: DVector::zeros(s),
        loglik: logc.iter().sum(),
    };

    for t in 0..steps {
        let mut gamma: Vec<f64> = (0..s).map(|i| alpha[t][i] * beta[t][i]).collect();
        let gsum: f64 = gamma.iter().sum();
        if gsum > 0.0 {
            for g in gamma.iter_mut() {
                *g /= gsum;
            }
        }
        for i in 0..s {
            st.emit_num[(i, y[t])] += gamma[i];
            st.emit_den[i] += gamma[i];
            if t == 0 {
                st.pi_acc[i] += gamma[i];
            }
            if t < u.len() {
                st.trans_den[u[t]][i] += gamma[i];
            }
        }
        if t < u.len() {
            let trans = &params.trans[u[t]];
            for i in 0..s {
                if alpha[t][i] == 0.0 {
                    continue;
                }
                for j in 0..s {
                    let xi = alpha[t][i]
                        * trans[(i, j)]
                        * params.emit[(j, y[t + 1])]
                        * beta[t + 1][j]
                        / scales[t + 1];
                    st.trans_num[u[t]][(i, j)] += xi;
                }
            }
        }
    }
    Ok(st)
}

/// Raise positive sub-floor entries to the floor and renormalize; exact
/// zeros stay zero. No-op for rows already at or above the floor.
fn floor_row(row: &mut [f64]) {
    let needs = row.iter().any(|&v| v > 0.0 && v < PROB_FLOOR);
    if !needs {
        return;
    }
    for v in row.iter_mut() {
        if *v > 0.0 && *v < PROB_FLOOR {
            *v = PROB_FLOOR;
        }
    }
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn bw_m_step(params: &IoHmmParams, total: &BwStats, n_rec: usize) -> IoHmmParams {
    let s = params.n_states();
    let mut out = params.clone();

    let mut pi: Vec<f64> = total.pi_acc.iter().map(|v| v / n_rec as f64).collect();
    floor_row(&mut pi);
    out.init = DVector::from_vec(pi);

    for (u, num) in total.trans_num.iter().enumerate() {
        for i in 0..s {
            let den = total.trans_den[u][i];
            if den > 0.0 {
                let mut row: Vec<f64> = (0..s).map(|j| num[(i, j)] / den).collect();
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                floor_row(&mut row);
                for j in 0..s {
                    out.trans[u][(i, j)] = row[j];
                }
            }
            // den == 0: this (input, state) pair carried no responsibility
            // mass; its row is unidentified and keeps its previous value.
        }
    }

    for i in 0..s {
        if total.emit_den[i] > 0.0 {
            let mut row: Vec<f64> = (0..params.n_obs())
                .map(|o| total.emit_num[(i, o)] / total.emit_den[i])
                .collect();
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            floor_row(&mut row);
            for o in 0..params.n_obs() {
                out.emit[(i, o)] = row[o];
            }
        }
    }
    out
}

/// Baum-Welch EM over a discrete dataset. Trace holds the loglik of the
/// parameters entering each iteration; nondecreasing within 1e-9.
pub fn baum_welch_fit(
    init: &IoHmmParams,
    data: &Dataset,
    opts: &BwOptions,
) -> Result<(IoHmmParams, Vec<f64>)> {
    init.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(
            "baum_welch_fit needs at least one record".into(),
        ));
    }
    let prepared: Vec<(Vec<usize>, Vec<usize>)> = data
        .records
        .iter()
        .map(|rec| {
            let u = symbols_from_sequence(&rec.inputs, init.n_inputs())?;
            let y = rec.outputs.as_discrete()?.to_vec();
            check_lengths(&u, &y)?;
            check_symbols(&y, init.n_obs(), "output")?;
            Ok((u, y))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut params = init.clone();
    let mut trace: Vec<f64> = Vec::new();
    for iter in 0..opts.max_iter {
        let per_record: Vec<BwStats> = prepared
            .par_iter()
            .map(|(u, y)| record_responsibilities(&params, u, y))
            .collect::<Result<Vec<_>>>()?;
        let mut total = BwStats {
            pi_acc: DVector::zeros(params.n_states()),
            trans_num: vec![
                DMatrix::zeros(params.n_states(), params.n_states());
                params.n_inputs()
            ],
            trans_den: vec![DVector::zeros(params.n_states()); params.n_inputs()],
            emit_num: DMatrix::zeros(params.n_states(), params.n_obs()),
            emit_den: DVector::zeros(params.n_states()),
            loglik: 0.0,
        };
        for st in &per_record {
            total.pi_acc += &st.pi_acc;
            for u in 0..params.n_inputs() {
                total.trans_num[u] += &st.trans_num[u];
                total.trans_den[u] += &st.trans_den[u];
            }
            total.emit_num += &st.emit_num;
            total.emit_den += &st.emit_den;
            total.loglik += st.loglik;
        }
        let ll = total.loglik;
        if let Some(&prev) = trace.last() {
            if ll < prev - 1e-9 {
                return Err(Error::MonotonicityViolation(format!(
                    "iteration {iter}: {ll} < {prev}"
                )));
            }
            if (ll - prev).abs() < opts.tol {
                trace.push(ll);
                return Ok((params, trace));
            }
        }
        trace.push(ll);
        params = bw_m_step(&params, &total, prepared.len());
    }
    Ok((params, trace))
}
