//! Linear Gaussian state-space models:
//!
//!   x_{t+1} = A x_t + B u_t + w_t,   w_t ~ N(0, Q),   x_0 ~ N(mu0, Sigma0)
//!   y_t     = C x_t + v_t,           v_t ~ N(0, R)
//!
//! Simulation, the exact Gaussian trajectory law of y_{0:T}, Kalman
//! filtering/smoothing, EM parameter fitting, and controllability
//! diagnostics. Identifiability holds only up to similarity transform, so
//! fitted systems are compared in trajectory-law space or through Markov
//! parameters, never by raw parameter distance.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Outputs, PerturbationSequence, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::linalg;
use crate::seeds;

/// System parameters θ = (A, B, C, Q, R) plus the initial-state law
/// (mu0, Sigma0) without which the trajectory law is undefined.
///
/// Q and Sigma0 may be singular (deterministic directions are legal); R is
/// expected positive definite wherever a likelihood is evaluated. The
/// normalization paths (EM, random initialization) floor Q and R at 1e-8·I;
/// hand-constructed noise-free systems are accepted for simulation and
/// exact-law work.
#[derive(Debug, Clone, PartialEq)]
pub struct LgssParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
}

impl LgssParams {
    /// (n, m, p) = (state, input, output) dimensions.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.nrows(), self.b.ncols(), self.c.nrows())
    }

    /// Check mutual dimension consistency and covariance sanity.
    pub fn validate(&self) -> Result<()> {
        let (n, m, p) = self.dims();
        let checks = [
            (self.a.nrows() == n && self.a.ncols() == n, "A must be n×n"),
            (self.b.nrows() == n && self.b.ncols() == m, "B must be n×m"),
            (self.c.nrows() == p && self.c.ncols() == n, "C must be p×n"),
            (self.q.nrows() == n && self.q.ncols() == n, "Q must be n×n"),
            (self.r.nrows() == p && self.r.ncols() == p, "R must be p×p"),
            (self.mu0.len() == n, "mu0 must have length n"),
            (
                self.sigma0.nrows() == n && self.sigma0.ncols() == n,
                "Sigma0 must be n×n",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::DimensionMismatch(format!(
                    "{msg} (n={n}, m={m}, p={p})"
                )));
            }
        }
        for (name, mat) in [("Q", &self.q), ("R", &self.r), ("Sigma0", &self.sigma0)] {
            if linalg::min_eigenvalue(mat) < -1e-10 {
                return Err(Error::NotPsd(format!("{name} has a negative eigenvalue")));
            }
        }
        Ok(())
    }

    /// Identity-observation default: A=0, B=0, C=I-ish, Q=I, R=I, mu0=0,
    /// Sigma0=I. A starting point callers overwrite field by field.
    pub fn neutral(n: usize, m: usize, p: usize) -> Self {
        let mut c = DMatrix::zeros(p, n);
        for i in 0..p.min(n) {
            c[(i, i)] = 1.0;
        }
        LgssParams {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, m),
            c,
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(p, p),
            mu0: DVector::zeros(n),
            sigma0: DMatrix::identity(n, n),
        }
    }

    /// Apply the similarity transform x ↦ Sx:
    /// (A,B,C,Q,mu0,Sigma0) ↦ (SAS⁻¹, SB, CS⁻¹, SQSᵀ, Smu0, SSigma0Sᵀ).
    /// R is untouched. The trajectory law is invariant under this map.
    pub fn similarity_transform(&self, s: &DMatrix<f64>) -> Result<LgssParams> {
        let n = self.a.nrows();
        if s.nrows() != n || s.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "transform must be {n}×{n}"
            )));
        }
        let s_inv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NumericalFailure("singular similarity transform".into()))?;
        Ok(LgssParams {
            a: s * &self.a * &s_inv,
            b: s * &self.b,
            c: &self.c * &s_inv,
            q: linalg::symmetrize(&(s * &self.q * s.transpose())),
            r: self.r.clone(),
            mu0: s * &self.mu0,
            sigma0: linalg::symmetrize(&(s * &self.sigma0 * s.transpose())),
        })
    }
}

// JSON schema: explicit dims plus row-major nested arrays, e.g.
// {"n":2,"m":1,"p":1,"a":[[..],[..]],"b":[[..],[..]],"c":[[..]],
//  "q":[[..],[..]],"r":[[..]],"mu0":[..],"sigma0":[[..],[..]]}
#[derive(Serialize, Deserialize)]
struct LgssRepr {
    n: usize,
    m: usize,
    p: usize,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    mu0: Vec<f64>,
    sigma0: Vec<Vec<f64>>,
}

impl Serialize for LgssParams {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let (n, m, p) = self.dims();
        LgssRepr {
            n,
            m,
            p,
            a: linalg::to_rows(&self.a),
            b: linalg::to_rows(&self.b),
            c: linalg::to_rows(&self.c),
            q: linalg::to_rows(&self.q),
            r: linalg::to_rows(&self.r),
            mu0: self.mu0.iter().copied().collect(),
            sigma0: linalg::to_rows(&self.sigma0),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for LgssParams {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = LgssRepr::deserialize(de)?;
        let params = LgssParams {
            a: linalg::from_rows(&repr.a, "A").map_err(D::Error::custom)?,
            b: linalg::from_rows(&repr.b, "B").map_err(D::Error::custom)?,
            c: linalg::from_rows(&repr.c, "C").map_err(D::Error::custom)?,
            q: linalg::from_rows(&repr.q, "Q").map_err(D::Error::custom)?,
            r: linalg::from_rows(&repr.r, "R").map_err(D::Error::custom)?,
            mu0: DVector::from_vec(repr.mu0),
            sigma0: linalg::from_rows(&repr.sigma0, "Sigma0").map_err(D::Error::custom)?,
        };
        let (n, m, p) = params.dims();
        if (n, m, p) != (repr.n, repr.m, repr.p) {
            return Err(D::Error::custom(format!(
                "declared dims ({},{},{}) disagree with matrices ({n},{m},{p})",
                repr.n, repr.m, repr.p
            )));
        }
        params.validate().map_err(D::Error::custom)?;
        Ok(params)
    }
}

fn standard_normal_vec(rng: &mut seeds::Rng, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| rng.sample(StandardNormal))
}

/// Stepping simulator. Draw order is fixed (x_0, then per step: v_t before
/// w_t), so open-loop [`simulate`] and the closed-loop runner produce
/// bit-identical trajectories for the same seed and inputs.
pub struct LgssSim {
    params: LgssParams,
    sqrt_q: DMatrix<f64>,
    sqrt_r: DMatrix<f64>,
    x: DVector<f64>,
    rng: seeds::Rng,
}

impl LgssSim {
    pub fn new(params: &LgssParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let sqrt_q = linalg::psd_sqrt(&params.q, 1e-10)?;
        let sqrt_r = linalg::psd_sqrt(&params.r, 1e-10)?;
        let sqrt_s0 = linalg::psd_sqrt(&params.sigma0, 1e-10)?;
        let mut rng = seeds::rng_from(seed);
        let n = params.a.nrows();
        let x = &params.mu0 + &sqrt_s0 * standard_normal_vec(&mut rng, n);
        Ok(LgssSim {
            params: params.clone(),
            sqrt_q,
            sqrt_r,
            x,
            rng,
        })
    }

    /// Sample y_t = C x_t + v_t at the current state.
    pub fn emit(&mut self) -> DVector<f64> {
        let p = self.params.c.nrows();
        &self.params.c * &self.x + &self.sqrt_r * standard_normal_vec(&mut self.rng, p)
    }

    /// Advance x_{t+1} = A x_t + B u_t + w_t.
    pub fn step(&mut self, u: &DVector<f64>) {
        let n = self.params.a.nrows();
        self.x = &self.params.a * &self.x
            + &self.params.b * u
            + &self.sqrt_q * standard_normal_vec(&mut self.rng, n);
    }
}

/// Simulate one trajectory under a fixed input sequence.
pub fn simulate(
    params: &LgssParams,
    u: &PerturbationSequence,
    seed: u64,
) -> Result<TrajectoryRecord> {
    let (_, m, p) = params.dims();
    if u.input_dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "inputs have dim {}, system expects {m}",
            u.input_dim()
        )));
    }
    let horizon = u.horizon();
    let mut sim = LgssSim::new(params, seed)?;
    let mut y = DMatrix::zeros(horizon + 1, p);
    for t in 0..horizon {
        y.row_mut(t).copy_from(&sim.emit().transpose());
        sim.step(&u.values.row(t).transpose());
    }
    y.row_mut(horizon).copy_from(&sim.emit().transpose());
    Ok(TrajectoryRecord {
        inputs: u.clone(),
        outputs: Outputs::Continuous(y),
        truth_tag: None,
        seed,
    })
}

/// Exact law of the stacked output trajectory: y_{0:T} is jointly Gaussian.
/// Stacking is time-major: entry t·p + j is channel j at time t.
#[derive(Debug, Clone)]
pub struct GaussianTrajectoryLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Output channels p; block t occupies rows t·p .. (t+1)·p.
    pub output_dim: usize,
}

impl GaussianTrajectoryLaw {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Stack a (T+1)×p output matrix time-major into a p(T+1) vector.
pub fn stack_rows(y: &DMatrix<f64>) -> DVector<f64> {
    let (rows, cols) = y.shape();
    DVector::from_fn(rows * cols, |i, _| y[(i / cols, i % cols)])
}

/// Exact Gaussian trajectory law under deterministic inputs.
///
/// Mean by the state recursion; covariance from P_{t+1} = A P_t Aᵀ + Q with
/// Cov(x_s, x_t) = P_s (A^{t−s})ᵀ for s ≤ t, mapped through C and R.
pub fn trajectory_law(params: &LgssParams, u: &PerturbationSequence) -> Result<GaussianTrajectoryLaw> {
    params.validate()?;
    let (_, m, p) = params.dims();
    if u.input_dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "inputs have dim {}, system expects {m}",
            u.input_dim()
        )));
    }
    let horizon = u.horizon();
    let steps = horizon + 1;

    let mut state_means = Vec::with_capacity(steps);
    let mut state_covs = Vec::with_capacity(steps);
    state_means.push(params.mu0.clone());
    state_covs.push(linalg::symmetrize(&params.sigma0));
    for t in 0..horizon {
        let ut = u.values.row(t).transpose();
        let next_mean = &params.a * &state_means[t] + &params.b * &ut;
        let next_cov =
            linalg::symmetrize(&(&params.a * &state_covs[t] * params.a.transpose() + &params.q));
        state_means.push(next_mean);
        state_covs.push(next_cov);
    }

    let mut mean = DVector::zeros(p * steps);
    for t in 0..steps {
        mean.rows_mut(t * p, p).copy_from(&(&params.c * &state_means[t]));
    }

    let mut cov = DMatrix::zeros(p * steps, p * steps);
    for s in 0..steps {
        let diag = &params.c * &state_covs[s] * params.c.transpose() + &params.r;
        cov.view_mut((s * p, s * p), (p, p))
            .copy_from(&linalg::symmetrize(&diag));
        // cross_state = Cov(x_s, x_t) for increasing t, advanced by one Aᵀ per step
        let mut cross_state = state_covs[s].clone();
        for t in (s + 1)..steps {
            cross_state *= params.a.transpose();
            let block = &params.c * &cross_state * params.c.transpose();
            cov.view_mut((s * p, t * p), (p, p)).copy_from(&block);
            cov.view_mut((t * p, s * p), (p, p)).copy_from(&block.transpose());
        }
    }

    Ok(GaussianTrajectoryLaw {
        mean,
        cov,
        output_dim: p,
    })
}

/// Kalman filter output. Index t of each list refers to time step t.
#[derive(Debug, Clone)]
pub struct FilterResult {
    /// log p(y_{0:T} | u, θ).
    pub loglik: f64,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
}

/// Standard predict/update recursion with Joseph-form covariance updates;
/// covariances re-symmetrized each step. `y` is (T+1)×p.
pub fn kalman_filter(
    params: &LgssParams,
    u: &PerturbationSequence,
    y: &DMatrix<f64>,
) -> Result<FilterResult> {
    params.validate()?;
    let (n, m, p) = params.dims();
    if u.input_dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "inputs have dim {}, system expects {m}",
            u.input_dim()
        )));
    }
    if y.nrows() != u.horizon() + 1 || y.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "outputs are {}×{}, expected {}×{p}",
            y.nrows(),
            y.ncols(),
            u.horizon() + 1
        )));
    }
    let steps = u.horizon() + 1;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    let mut predicted_means = Vec::with_capacity(steps);
    let mut predicted_covs = Vec::with_capacity(steps);
    let mut filtered_means = Vec::with_capacity(steps);
    let mut filtered_covs = Vec::with_capacity(steps);
    let mut loglik = 0.0;

    let mut x_pred = params.mu0.clone();
    let mut p_pred = linalg::symmetrize(&params.sigma0);
    let identity = DMatrix::<f64>::identity(n, n);

    for t in 0..steps {
        predicted_means.push(x_pred.clone());
        predicted_covs.push(p_pred.clone());

        let innovation_cov = &params.c * &p_pred * params.c.transpose() + &params.r;
        let (s_inv, s_logdet) = linalg::pd_inverse_logdet(&innovation_cov)?;
        let innovation = y.row(t).transpose() - &params.c * &x_pred;
        let maha = (innovation.transpose() * &s_inv * &innovation)[(0, 0)];
        loglik += -0.5 * (p as f64 * ln_2pi + s_logdet + maha);

        let gain = &p_pred * params.c.transpose() * &s_inv;
        let x_filt = &x_pred + &gain * &innovation;
        let shrink = &identity - &gain * &params.c;
        let p_filt = linalg::symmetrize(
            &(&shrink * &p_pred * shrink.transpose() + &gain * &params.r * gain.transpose()),
        );
        filtered_means.push(x_filt.clone());
        filtered_covs.push(p_filt.clone());

        if t + 1 < steps {
            let ut = u.values.row(t).transpose();
            x_pred = &params.a * &x_filt + &params.b * &ut;
            p_pred =
                linalg::symmetrize(&(&params.a * &p_filt * params.a.transpose() + &params.q));
        }
    }

    Ok(FilterResult {
        loglik,
        filtered_means,
        filtered_covs,
        predicted_means,
        predicted_covs,
    })
}

/// RTS smoother output; `pairwise_covs[t]` = Cov(x_{t+1}, x_t | y_{0:T}),
/// the lag-one covariance EM's transition moments need.
#[derive(Debug, Clone)]
pub struct SmoothResult {
    pub filter: FilterResult,
    pub smoothed_means: Vec<DVector<f64>>,
    pub smoothed_covs: Vec<DMatrix<f64>>,
    pub pairwise_covs: Vec<DMatrix<f64>>,
}

/// RTS backward recursion on top of [`kalman_filter`]. Gains use a
/// pseudo-inverse of the predicted covariance so deterministic (singular)
/// state directions smooth cleanly.
pub fn kalman_smooth(
    params: &LgssParams,
    u: &PerturbationSequence,
    y: &DMatrix<f64>,
) -> Result<SmoothResult> {
    let filter = kalman_filter(params, u, y)?;
    let steps = filter.filtered_means.len();
    let mut smoothed_means = filter.filtered_means.clone();
    let mut smoothed_covs = filter.filtered_covs.clone();
    let mut pairwise_covs = vec![DMatrix::zeros(0, 0); steps.saturating_sub(1)];

    for t in (0..steps.saturating_sub(1)).rev() {
        let gain = &filter.filtered_covs[t]
            * params.a.transpose()
            * linalg::pseudo_inverse(&filter.predicted_covs[t + 1]);
        smoothed_means[t] = &filter.filtered_means[t]
            + &gain * (&smoothed_means[t + 1] - &filter.predicted_means[t + 1]);
        smoothed_covs[t] = linalg::symmetrize(
            &(&filter.filtered_covs[t]
                + &gain
                    * (&smoothed_covs[t + 1] - &filter.predicted_covs[t + 1])
                    * gain.transpose()),
        );
        pairwise_covs[t] = &smoothed_covs[t + 1] * gain.transpose();
    }

    Ok(SmoothResult {
        filter,
        smoothed_means,
        smoothed_covs,
        pairwise_covs,
    })
}

/// Parameter blocks EM leaves untouched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmFixed {
    pub a: bool,
    pub b: bool,
    pub c: bool,
    pub q: bool,
    pub r: bool,
    pub mu0: bool,
    pub sigma0: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
    #[serde(rename = "fixed")]
    pub fixed: EmFixed,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iter: 200,
            tol: 1e-6,
            fixed: EmFixed::default(),
        }
    }
}

/// Smoothed sufficient statistics of one record, plus its loglik.
struct RecStats {
    s_xx: DMatrix<f64>,
    s_xu: DMatrix<f64>,
    s_uu: DMatrix<f64>,
    s_x1x: DMatrix<f64>,
    s_x1u: DMatrix<f64>,
    s_x1x1: DMatrix<f64>,
    s_xx_all: DMatrix<f64>,
    s_yx: DMatrix<f64>,
    s_yy: DMatrix<f64>,
    x0: DVector<f64>,
    p0_outer: DMatrix<f64>,
    n_trans: usize,
    n_emit: usize,
    loglik: f64,
}

fn record_stats(params: &LgssParams, rec: &TrajectoryRecord) -> Result<RecStats> {
    let (n, m, p) = params.dims();
    let y = rec.outputs.as_continuous()?;
    let sm = kalman_smooth(params, &rec.inputs, y)?;
    let horizon = rec.inputs.horizon();

    let mut st = RecStats {
        s_xx: DMatrix::zeros(n, n),
        s_xu: DMatrix::zeros(n, m),
        s_uu: DMatrix::zeros(m, m),
        s_x1x: DMatrix::zeros(n, n),
        s_x1u: DMatrix::zeros(n, m),
        s_x1x1: DMatrix::zeros(n, n),
        s_xx_all: DMatrix::zeros(n, n),
        s_yx: DMatrix::zeros(p, n),
        s_yy: DMatrix::zeros(p, p),
        x0: sm.smoothed_means[0].clone(),
        p0_outer: &sm.smoothed_covs[0]
            + &sm.smoothed_means[0] * sm.smoothed_means[0].transpose(),
        n_trans: horizon,
        n_emit: horizon + 1,
        loglik: sm.filter.loglik,
    };

    for t in 0..horizon {
        let xt = &sm.smoothed_means[t];
        let xt1 = &sm.smoothed_means[t + 1];
        let ut = rec.inputs.values.row(t).transpose();
        st.s_xx += &sm.smoothed_covs[t] + xt * xt.transpose();
        st.s_xu += xt * ut.transpose();
        st.s_uu += &ut * ut.transpose();
        st.s_x1x += &sm.pairwise_covs[t] + xt1 * xt.transpose();
        st.s_x1u += xt1 * ut.transpose();
        st.s_x1x1 += &sm.smoothed_covs[t + 1] + xt1 * xt1.transpose();
    }
    for t in 0..=horizon {
        let xt = &sm.smoothed_means[t];
        let yt = y.row(t).transpose();
        st.s_xx_all += &sm.smoothed_covs[t] + xt * xt.transpose();
        st.s_yx += &yt * xt.transpose();
        st.s_yy += &yt * yt.transpose();
    }
    Ok(st)
}

struct EStats {
    total: RecStats,
    sum_x0: DVector<f64>,
    sum_p0: DMatrix<f64>,
    n_rec: usize,
}

fn e_step(params: &LgssParams, data: &Dataset) -> Result<EStats> {
    // Records smooth in parallel; the reduction runs in record order so the
    // accumulated sums are bit-stable regardless of thread count.
    let per_record: Vec<RecStats> = data
        .records
        .par_iter()
        .map(|rec| record_stats(params, rec))
        .collect::<Result<Vec<_>>>()?;

    let (n, m, p) = params.dims();
    let mut total = RecStats {
        s_xx: DMatrix::zeros(n, n),
        s_xu: DMatrix::zeros(n, m),
        s_uu: DMatrix::zeros(m, m),
        s_x1x: DMatrix::zeros(n, n),
        s_x1u: DMatrix::zeros(n, m),
        s_x1x1: DMatrix::zeros(n, n),
        s_xx_all: DMatrix::zeros(n, n),
        s_yx: DMatrix::zeros(p, n),
        s_yy: DMatrix::zeros(p, p),
        x0: DVector::zeros(n),
        p0_outer: DMatrix::zeros(n, n),
        n_trans: 0,
        n_emit: 0,
        loglik: 0.0,
    };
    let mut sum_x0 = DVector::zeros(n);
    let mut sum_p0 = DMatrix::zeros(n, n);
    for st in &per_record {
        total.s_xx += &st.s_xx;
        total.s_xu += &st.s_xu;
        total.s_uu += &st.s_uu;
        total.s_x1x += &st.s_x1x;
        total.s_x1u += &st.s_x1u;
        total.s_x1x1 += &st.s_x1x1;
        total.s_xx_all += &st.s_xx_all;
        total.s_yx += &st.s_yx;
        total.s_yy += &st.s_yy;
        total.n_trans += st.n_trans;
        total.n_emit += st.n_emit;
        total.loglik += st.loglik;
        sum_x0 += &st.x0;
        sum_p0 += &st.p0_outer;
    }
    Ok(EStats {
        total,
        sum_x0,
        sum_p0,
        n_rec: per_record.len(),
    })
}

/// Relative covariance floor: after each M-step the spectra of Q and R are
/// floored at NOISE_FLOOR times their own largest eigenvalue. This caps the
/// condition number at 1e8, which is what EM needs to stay out of singular
/// territory, while an exactly noiseless system is left at (numerical) zero
/// instead of being inflated to an absolute floor.
const NOISE_FLOOR: f64 = 1e-8;

fn m_step(params: &LgssParams, stats: &EStats, fixed: &EmFixed) -> LgssParams {
    let (n, m, _) = params.dims();
    let t = &stats.total;
    let mut out = params.clone();

    // Joint regression of x_{t+1} on [x_t; u_t].
    let mut moment = DMatrix::zeros(n + m, n + m);
    moment.view_mut((0, 0), (n, n)).copy_from(&t.s_xx);
    moment.view_mut((0, n), (n, m)).copy_from(&t.s_xu);
    moment.view_mut((n, 0), (m, n)).copy_from(&t.s_xu.transpose());
    moment.view_mut((n, n), (m, m)).copy_from(&t.s_uu);
    let mut cross = DMatrix::zeros(n, n + m);
    cross.view_mut((0, 0), (n, n)).copy_from(&t.s_x1x);
    cross.view_mut((0, n), (n, m)).copy_from(&t.s_x1u);

    match (fixed.a, fixed.b) {
        (false, false) => {
            let g = &cross * linalg::pseudo_inverse(&moment);
            out.a = g.view((0, 0), (n, n)).into();
            out.b = g.view((0, n), (n, m)).into();
        }
        (true, false) => {
            out.b = (&t.s_x1u - &out.a * &t.s_xu) * linalg::pseudo_inverse(&t.s_uu);
        }
        (false, true) => {
            out.a = (&t.s_x1x - &out.b * t.s_xu.transpose()) * linalg::pseudo_inverse(&t.s_xx);
        }
        (true, true) => {}
    }

    if !fixed.q {
        let mut g = DMatrix::zeros(n, n + m);
        g.view_mut((0, 0), (n, n)).copy_from(&out.a);
        g.view_mut((0, n), (n, m)).copy_from(&out.b);
        let q_raw = (&t.s_x1x1 - &g * cross.transpose() - &cross * g.transpose()
            + &g * &moment * g.transpose())
            / t.n_trans as f64;
        out.q = linalg::eigen_floor_rel(&linalg::symmetrize(&q_raw), NOISE_FLOOR);
    }

    if !fixed.c {
        out.c = &t.s_yx * linalg::pseudo_inverse(&t.s_xx_all);
    }
    if !fixed.r {
        let r_raw = (&t.s_yy - &out.c * t.s_yx.transpose() - &t.s_yx * out.c.transpose()
            + &out.c * &t.s_xx_all * out.c.transpose())
            / t.n_emit as f64;
        out.r = linalg::eigen_floor_rel(&linalg::symmetrize(&r_raw), NOISE_FLOOR);
    }

    let n_rec = stats.n_rec as f64;
    let x0_bar = &stats.sum_x0 / n_rec;
    if !fixed.mu0 {
        out.mu0 = x0_bar.clone();
    }
    if !fixed.sigma0 {
        let s0_raw = &stats.sum_p0 / n_rec - &out.mu0 * x0_bar.transpose()
            - &x0_bar * out.mu0.transpose()
            + &out.mu0 * out.mu0.transpose();
        out.sigma0 = linalg::eigen_floor(&linalg::symmetrize(&s0_raw), 0.0);
    }
    out
}

/// EM fit with an optional post-M-step hook. The hook supports penalized
/// variants (shrinkage toward zero); since a hook changes the objective,
/// plain-likelihood monotonicity is not enforced when one is present.
pub fn em_fit_with(
    init: &LgssParams,
    data: &Dataset,
    opts: &EmOptions,
    post_m: Option<&(dyn Fn(&mut LgssParams) + Sync)>,
) -> Result<(LgssParams, Vec<f64>)> {
    init.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("em_fit needs at least one record".into()));
    }
    let mut params = init.clone();
    let mut trace: Vec<f64> = Vec::new();
    for iter in 0..opts.max_iter {
        let stats = e_step(&params, data)?;
        let ll = stats.total.loglik;
        if let Some(&prev) = trace.last() {
            if post_m.is_none() && ll < prev - 1e-9 {
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
        params = m_step(&params, &stats, &opts.fixed);
        if let Some(hook) = post_m {
            hook(&mut params);
        }
    }
    Ok((params, trace))
}

/// Maximum-likelihood EM. The trace holds the loglik of the parameters
/// entering each iteration and is nondecreasing within 1e-9; a decrease
/// beyond that raises MonotonicityViolation.
pub fn em_fit(
    init: &LgssParams,
    data: &Dataset,
    opts: &EmOptions,
) -> Result<(LgssParams, Vec<f64>)> {
    em_fit_with(init, data, opts, None)
}

/// Controllability matrix 𝒞 = [B AB … A^{n−1}B] and its numerical rank.
/// Full rank means inputs reach every latent direction.
pub fn controllability_matrix(params: &LgssParams) -> (DMatrix<f64>, usize) {
    let (n, m, _) = params.dims();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = params.b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = &params.a * &block;
    }
    let rank = linalg::numerical_rank(&ctrb);
    (ctrb, rank)
}

/// Markov parameters [CB, CAB, …, CA^{k_max}B]: the impulse response, which
/// is invariant under similarity transforms and so safe for comparing fits.
pub fn markov_parameters(params: &LgssParams, k_max: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(k_max + 1);
    let mut block = params.b.clone();
    for _ in 0..=k_max {
        out.push(&params.c * &block);
        block = &params.a * &block;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_params(a: f64, b: f64, c: f64, q: f64, r: f64, mu0: f64, s0: f64) -> LgssParams {
        LgssParams {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DMatrix::from_element(1, 1, c),
            q: DMatrix::from_element(1, 1, q),
            r: DMatrix::from_element(1, 1, r),
            mu0: DVector::from_element(1, mu0),
            sigma0: DMatrix::from_element(1, 1, s0),
        }
    }

    fn seq(values: &[f64]) -> PerturbationSequence {
        PerturbationSequence {
            values: DMatrix::from_column_slice(values.len(), 1, values),
            policy_id: "test".to_string(),
            seed: 0,
        }
    }

    #[test]
    fn noiseless_single_step() {
        let p = scalar_params(0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        let rec = simulate(&p, &seq(&[2.0]), 1).unwrap();
        let y = rec.outputs.as_continuous().unwrap();
        assert_eq!(y.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn noiseless_geometric_recursion() {
        let p = scalar_params(2.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0);
        let rec = simulate(&p, &seq(&[0.0, 0.0]), 1).unwrap();
        let y = rec.outputs.as_continuous().unwrap();
        assert_eq!(y.as_slice(), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn simulate_deterministic_in_seed() {
        let p = scalar_params(0.7, 1.0, 2.0, 0.3, 0.2, 0.0, 1.0);
        let u = seq(&[1.0, -1.0, 0.5]);
        let a = simulate(&p, &u, 99).unwrap();
        let b = simulate(&p, &u, 99).unwrap();
        assert_eq!(a.outputs, b.outputs);
        let c = simulate(&p, &u, 100).unwrap();
        assert_ne!(a.outputs, c.outputs);
    }

    #[test]
    fn law_of_deterministic_system() {
        let p = scalar_params(0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        let law = trajectory_law(&p, &seq(&[0.7])).unwrap();
        assert_eq!(law.mean.as_slice(), &[0.0, 0.7]);
        assert_eq!(law.cov.iter().map(|v| v.abs()).sum::<f64>(), 0.0);
    }

    #[test]
    fn law_hand_evaluated_covariance() {
        let p = scalar_params(0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0);
        let law = trajectory_law(&p, &seq(&[0.0])).unwrap();
        assert_eq!(law.mean.as_slice(), &[0.0, 0.0]);
        assert_relative_eq!(law.cov[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(law.cov[(1, 1)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(law.cov[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn filter_single_sample_loglik() {
        // y_0 ~ N(0, Sigma0 + R) = N(0, 2); log N(0; 0, 2) = -0.5 ln(4π).
        let p = scalar_params(0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0);
        let u = PerturbationSequence {
            values: DMatrix::zeros(0, 1),
            policy_id: "empty".to_string(),
            seed: 0,
        };
        let y = DMatrix::from_element(1, 1, 0.0);
        let f = kalman_filter(&p, &u, &y).unwrap();
        assert_relative_eq!(
            f.loglik,
            -0.5 * (4.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn filter_uninformative_observation_limit() {
        let mut p = LgssParams::neutral(2, 1, 1);
        p.a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        p.b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        p.c = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        p.q *= 0.1;
        p.r *= 1e6;
        let u = seq(&[1.0, -0.5, 0.25, 0.0, 1.0]);
        let y = DMatrix::from_column_slice(6, 1, &[0.3, -0.2, 0.5, 0.1, -0.4, 0.2]);
        let f = kalman_filter(&p, &u, &y).unwrap();
        for t in 0..6 {
            let drift = (&f.filtered_means[t] - &f.predicted_means[t]).norm();
            let scale = 1.0 + f.predicted_means[t].norm();
            assert!(drift / scale < 1e-3, "t={t}: drift {drift}");
        }
    }

    #[test]
    fn smoother_trivial_at_single_step() {
        let p = scalar_params(0.5, 1.0, 1.0, 0.2, 0.3, 0.1, 0.4);
        let u = PerturbationSequence {
            values: DMatrix::zeros(0, 1),
            policy_id: "empty".to_string(),
            seed: 0,
        };
        let y = DMatrix::from_element(1, 1, 0.7);
        let sm = kalman_smooth(&p, &u, &y).unwrap();
        assert_eq!(sm.smoothed_means[0], sm.filter.filtered_means[0]);
        assert_eq!(sm.smoothed_covs[0], sm.filter.filtered_covs[0]);
        assert!(sm.pairwise_covs.is_empty());
    }

    #[test]
    fn smoother_deterministic_state() {
        // Q = Sigma0 = 0: the state path is fixed, whatever y says.
        let p = scalar_params(0.5, 1.0, 1.0, 0.0, 1.0, 0.3, 0.0);
        let u = seq(&[1.0, -1.0, 0.5]);
        let y = DMatrix::from_column_slice(4, 1, &[5.0, -3.0, 2.0, 0.0]);
        let sm = kalman_smooth(&p, &u, &y).unwrap();
        let mut x = 0.3;
        for t in 0..4 {
            assert_relative_eq!(sm.smoothed_means[t][0], x, epsilon = 1e-10);
            if t < 3 {
                x = 0.5 * x + u.values[(t, 0)];
            }
        }
    }

    #[test]
    fn smoothed_covs_never_exceed_filtered() {
        let p = scalar_params(0.8, 1.0, 1.5, 0.3, 0.4, 0.0, 1.0);
        let u = seq(&[1.0, 0.0, -1.0, 0.5]);
        let rec = simulate(&p, &u, 3).unwrap();
        let sm = kalman_smooth(&p, &u, rec.outputs.as_continuous().unwrap()).unwrap();
        for t in 0..5 {
            let gap = &sm.filter.filtered_covs[t] - &sm.smoothed_covs[t];
            assert!(crate::linalg::min_eigenvalue(&gap) > -1e-8);
        }
    }

    #[test]
    fn em_fixed_point_on_noiseless_data() {
        let truth = scalar_params(0.8, 1.0, 1.0, 0.0, 0.0, 0.3, 0.0);
        let mut records = Vec::new();
        for i in 0..20 {
            let u = crate::policies::generate_open_loop(
                &crate::policies::PerturbationPolicy {
                    id: "prbs".to_string(),
                    kind: crate::policies::PolicyKind::Prbs {
                        amplitude: 1.0,
                        switch_prob: 0.4,
                    },
                },
                40,
                1,
                i,
                &[(-1.0, 1.0)],
            )
            .unwrap();
            records.push(simulate(&truth, &u, 1000 + i).unwrap());
        }
        let data = crate::domain::group_dataset(records).unwrap();
        let opts = EmOptions {
            max_iter: 1,
            tol: 0.0,
            fixed: EmFixed::default(),
        };
        let (fitted, trace) = em_fit(&truth, &data, &opts).unwrap();
        assert_eq!(trace.len(), 1);
        assert!((fitted.a[(0, 0)] - 0.8).abs() < 1e-6);
        assert!((fitted.b[(0, 0)] - 1.0).abs() < 1e-6);
        assert!((fitted.c[(0, 0)] - 1.0).abs() < 1e-6);
        assert!((fitted.mu0[0] - 0.3).abs() < 1e-6);
        assert!(fitted.q[(0, 0)] <= NOISE_FLOOR + 1e-12);
        assert!(fitted.r[(0, 0)] <= NOISE_FLOOR + 1e-12);
    }

    #[test]
    fn em_trace_monotone_on_random_starts() {
        let truth = scalar_params(0.6, 1.0, 1.0, 0.1, 0.1, 0.0, 0.5);
        let mut records = Vec::new();
        for i in 0..10 {
            let u = crate::policies::generate_open_loop(
                &crate::policies::PerturbationPolicy {
                    id: "prbs".to_string(),
                    kind: crate::policies::PolicyKind::Prbs {
                        amplitude: 1.0,
                        switch_prob: 0.3,
                    },
                },
                30,
                1,
                i,
                &[(-1.0, 1.0)],
            )
            .unwrap();
            records.push(simulate(&truth, &u, 2000 + i).unwrap());
        }
        let data = crate::domain::group_dataset(records).unwrap();
        for s in 0..3u64 {
            let init = scalar_params(
                0.1 + 0.2 * s as f64,
                0.5,
                1.2,
                0.5,
                0.5,
                0.1,
                1.0,
            );
            let opts = EmOptions {
                max_iter: 30,
                tol: 0.0,
                fixed: EmFixed::default(),
            };
            let (_, trace) = em_fit(&init, &data, &opts).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "trace decreased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn em_rejects_empty_dataset() {
        let p = scalar_params(0.5, 1.0, 1.0, 0.1, 0.1, 0.0, 1.0);
        let data = Dataset::default();
        assert!(matches!(
            em_fit(&p, &data, &EmOptions::default()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn controllability_identity_repeated_column() {
        let mut p = LgssParams::neutral(2, 1, 1);
        p.a = DMatrix::identity(2, 2);
        p.b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let (ctrb, rank) = controllability_matrix(&p);
        assert_eq!(ctrb, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]));
        assert_eq!(rank, 1);
    }

    #[test]
    fn controllability_nilpotent_full_rank() {
        let mut p = LgssParams::neutral(2, 1, 1);
        p.a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        p.b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let (ctrb, rank) = controllability_matrix(&p);
        assert_eq!(ctrb, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(rank, 2);
    }

    #[test]
    fn controllability_zero_input_rank_zero() {
        let p = LgssParams::neutral(3, 2, 1);
        let (_, rank) = controllability_matrix(&p);
        assert_eq!(rank, 0);
    }

    #[test]
    fn markov_scalar_sequence() {
        let p = scalar_params(0.5, 2.0, 3.0, 0.1, 0.1, 0.0, 1.0);
        let g = markov_parameters(&p, 2);
        assert_eq!(g[0][(0, 0)], 6.0);
        assert_eq!(g[1][(0, 0)], 3.0);
        assert_eq!(g[2][(0, 0)], 1.5);
    }

    #[test]
    fn markov_nilpotent_truncates() {
        let p = scalar_params(0.0, 2.0, 3.0, 0.1, 0.1, 0.0, 1.0);
        let g = markov_parameters(&p, 3);
        assert_eq!(g[0][(0, 0)], 6.0);
        for gk in &g[1..] {
            assert_eq!(gk[(0, 0)], 0.0);
        }
    }

    #[test]
    fn markov_invariant_under_similarity() {
        let mut p = LgssParams::neutral(2, 1, 1);
        p.a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]);
        p.b = DMatrix::from_column_slice(2, 1, &[1.0, 0.5]);
        p.c = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 1.5]);
        let pt = p.similarity_transform(&s).unwrap();
        let ga = markov_parameters(&p, 5);
        let gb = markov_parameters(&pt, 5);
        for (x, z) in ga.iter().zip(&gb) {
            assert_relative_eq!(x[(0, 0)], z[(0, 0)], epsilon = 1e-10);
        }
    }

    #[test]
    fn json_round_trip_with_dims() {
        let mut p = LgssParams::neutral(2, 1, 1);
        p.a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]);
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"n\":2"));
        let back: LgssParams = serde_json::from_str(&text).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn json_rejects_inconsistent_dims() {
        let text = r#"{"n":2,"m":1,"p":1,
            "a":[[1.0]],"b":[[0.0],[0.0]],"c":[[1.0,0.0]],
            "q":[[1.0,0.0],[0.0,1.0]],"r":[[1.0]],
            "mu0":[0.0,0.0],"sigma0":[[1.0,0.0],[0.0,1.0]]}"#;
        assert!(serde_json::from_str::<LgssParams>(text).is_err());
    }

    #[test]
    fn stacking_is_time_major() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let v = stack_rows(&y);
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
