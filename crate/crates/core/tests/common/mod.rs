//! Independent oracles and instance generators shared by the integration
//! tests. Everything here recomputes quantities from first principles so
//! agreement with the library is evidence, not tautology.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use persid_core::domain::{ExperimentalDomain, OutputSpace, PerturbationSequence};
use persid_core::iohmm::IoHmmParams;
use persid_core::lgss::LgssParams;
use persid_core::policies::{PerturbationPolicy, PolicyKind};
use persid_core::seeds;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Joint law of the stacked outputs built as a single linear map of the
/// independent noise vector xi = (x0, w_0..w_{T-1}, v_0..v_T): mean and
/// covariance come from y = M xi + d with Cov(xi) block diagonal. No
/// moment recursion is shared with the library's law construction.
pub fn linear_map_law(params: &LgssParams, u: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = params.a.nrows();
    let p = params.c.nrows();
    let t_len = u.nrows();
    let steps = t_len + 1;

    // xi layout: [x0 (n)] [w_0..w_{T-1} (n each)] [v_0..v_T (p each)]
    let xi_dim = n + t_len * n + steps * p;
    let out_dim = steps * p;

    // State-to-xi sensitivities: x_t = A^t x0 + sum_k A^{t-1-k} (B u_k + w_k).
    // Build rows of x_t as x_prev advanced one step at a time.
    let mut x_map = DMatrix::<f64>::zeros(n, xi_dim); // current x_t as map of xi
    let mut x_det = DVector::<f64>::zeros(n); // deterministic input part
    x_map.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));

    let mut big_m = DMatrix::<f64>::zeros(out_dim, xi_dim);
    let mut d = DVector::<f64>::zeros(out_dim);

    for t in 0..steps {
        // y_t = C x_t + v_t
        let y_map = &params.c * &x_map;
        big_m.view_mut((t * p, 0), (p, xi_dim)).copy_from(&y_map);
        let v_col = n + t_len * n + t * p;
        for j in 0..p {
            big_m[(t * p + j, v_col + j)] += 1.0;
        }
        d.rows_mut(t * p, p).copy_from(&(&params.c * &x_det));
        if t == t_len {
            break;
        }
        // advance: x_{t+1} = A x_t + B u_t + w_t
        x_map = &params.a * &x_map;
        let w_col = n + t * n;
        for j in 0..n {
            x_map[(j, w_col + j)] += 1.0;
        }
        x_det = &params.a * &x_det + &params.b * u.row(t).transpose();
    }

    // Cov(xi) = diag(Sigma0, Q.., R..); mean(xi) = (mu0, 0, .., 0)
    let mut lam = DMatrix::<f64>::zeros(xi_dim, xi_dim);
    lam.view_mut((0, 0), (n, n)).copy_from(&params.sigma0);
    for t in 0..t_len {
        lam.view_mut((n + t * n, n + t * n), (n, n)).copy_from(&params.q);
    }
    for t in 0..steps {
        let c0 = n + t_len * n + t * p;
        lam.view_mut((c0, c0), (p, p)).copy_from(&params.r);
    }
    let mut xi_mean = DVector::<f64>::zeros(xi_dim);
    xi_mean.rows_mut(0, n).copy_from(&params.mu0);

    let mean = &big_m * xi_mean + d;
    let cov = &big_m * lam * big_m.transpose();
    (mean, cov)
}

/// Log density of N(mean, cov) at y, by Cholesky.
pub fn gaussian_logpdf(mean: &DVector<f64>, cov: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let d = mean.len() as f64;
    let chol = cov
        .clone()
        .cholesky()
        .expect("oracle covariance must be positive definite");
    let half_logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let z = chol.solve(&(y - mean));
    let quad = (y - mean).dot(&z);
    -0.5 * (quad + d * (2.0 * std::f64::consts::PI).ln()) - half_logdet
}

/// Brute-force loglik of an input-driven HMM by summing over every state
/// path. Exponential in T; only for tiny instances.
pub fn path_enumeration_loglik(params: &IoHmmParams, u: &[usize], y: &[usize]) -> f64 {
    let s = params.n_states();
    let steps = y.len();
    assert_eq!(u.len() + 1, steps, "need T inputs for T+1 outputs");
    let n_paths = s.checked_pow(steps as u32).expect("path count overflow");
    let mut total = 0.0f64;
    for code in 0..n_paths {
        let mut idx = code;
        let mut path = Vec::with_capacity(steps);
        for _ in 0..steps {
            path.push(idx % s);
            idx /= s;
        }
        let mut prob = params.init[path[0]] * params.emit[(path[0], y[0])];
        for t in 0..u.len() {
            prob *= params.trans[u[t]][(path[t], path[t + 1])] * params.emit[(path[t + 1], y[t + 1])];
        }
        total += prob;
    }
    total.ln()
}

/// Random stable instance with well-conditioned noise. Spectral radius is
/// set through the largest singular value, a deliberately different route
/// from the library's row-sum damping.
pub fn random_stable_lgss(n: usize, m: usize, p: usize, rho: f64, rng: &mut seeds::Rng) -> LgssParams {
    let mut normal = |r: usize, c: usize| {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    };
    let mut a = normal(n, n);
    let smax = a.clone().svd(false, false).singular_values[0];
    if smax > 0.0 {
        a *= rho / smax;
    }
    let b = normal(n, m);
    let c = normal(p, n);
    let lq = normal(n, n) * 0.3;
    let q = &lq * lq.transpose() + DMatrix::identity(n, n) * 0.05;
    let lr = normal(p, p) * 0.3;
    let r = &lr * lr.transpose() + DMatrix::identity(p, p) * 0.05;
    let ls = normal(n, n) * 0.3;
    let sigma0 = &ls * ls.transpose() + DMatrix::identity(n, n) * 0.05;
    let mu0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
    LgssParams { a, b, c, q, r, mu0, sigma0 }
}

/// Random input matrix inside the given symmetric bound.
pub fn random_inputs(t_len: usize, m: usize, bound: f64, rng: &mut seeds::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(t_len, m, |_, _| rng.gen_range(-bound..bound))
}

pub fn sequence(values: DMatrix<f64>, id: &str) -> PerturbationSequence {
    PerturbationSequence {
        values,
        policy_id: id.to_string(),
        seed: 0,
    }
}

pub fn continuous_domain(input_dim: usize, output_dim: usize, bound: f64, horizon: usize) -> ExperimentalDomain {
    ExperimentalDomain {
        input_dim,
        output_dim,
        input_bounds: vec![(-bound, bound); input_dim],
        output_space: OutputSpace::Continuous { dim: output_dim },
        horizon,
        policy_family_ids: vec![],
    }
}

pub fn discrete_domain(n_inputs: usize, n_obs: usize, horizon: usize) -> ExperimentalDomain {
    ExperimentalDomain {
        input_dim: 1,
        output_dim: 1,
        input_bounds: vec![(0.0, (n_inputs - 1) as f64)],
        output_space: OutputSpace::Discrete { size: n_obs },
        horizon,
        policy_family_ids: vec![],
    }
}

pub fn policy(id: &str, kind: PolicyKind) -> PerturbationPolicy {
    PerturbationPolicy { id: id.to_string(), kind }
}
