//! Discrepancy functionals between trajectory distributions: closed-form
//! Gaussian W2, sample-based squared MMD and energy distance, and exhaustive
//! total variation for small discrete laws.
//!
//! Default routing: LGSS-vs-LGSS comparisons use exact W2 on trajectory
//! laws, small discrete laws use TV, anything sample-only uses energy
//! distance. W2 carries the per-timestep normalization (÷ sqrt(T+1)) so δ
//! thresholds are horizon-comparable; the sample statistics are raw.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lgss::GaussianTrajectoryLaw;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyKind {
    GaussianW2,
    Mmd,
    Energy,
    TvExhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    PerTimestep,
}

/// Where the number came from: law dimensions for exact kinds, sample
/// counts for the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DiscrepancyMeta {
    Laws { dim: usize },
    Samples { n_left: usize, n_right: usize, dim: usize },
    Support { size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyResult {
    pub value: f64,
    pub kind: DiscrepancyKind,
    pub normalization: Normalization,
    pub meta: DiscrepancyMeta,
}

/// Eigenvalues of a covariance below this are a contract breach, not noise.
const PSD_TOL: f64 = 1e-10;

/// 2-Wasserstein distance between Gaussian laws:
///
///   W2² = ‖m_a − m_b‖² + tr(Σ_a + Σ_b − 2(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})
///
/// Matrix square roots go through symmetric eigendecomposition; eigenvalues
/// in [−1e−10, 0) clamp to zero, anything lower is NotPsd. PerTimestep
/// divides the distance by sqrt(T+1).
pub fn gaussian_w2(
    a: &GaussianTrajectoryLaw,
    b: &GaussianTrajectoryLaw,
    normalization: Normalization,
) -> Result<DiscrepancyResult> {
    let dim = a.dim();
    if b.dim() != dim || a.output_dim != b.output_dim {
        return Err(Error::DimensionMismatch(format!(
            "laws have dims {dim}/{} with {} vs {} channels",
            b.dim(),
            a.output_dim,
            b.output_dim
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();

    let sqrt_a = linalg::psd_sqrt(&a.cov, PSD_TOL)?;
    // Verify b is PSD under the same policy before mixing it in.
    linalg::psd_sqrt(&b.cov, PSD_TOL)?;
    let mixed = linalg::symmetrize(&(&sqrt_a * &b.cov * &sqrt_a));
    let eigs = linalg::sym_eigen(&mixed).0;
    let cross: f64 = eigs.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let trace_term = a.cov.trace() + b.cov.trace() - 2.0 * cross;

    // The W2² terms cancel to eigensolver noise when the laws coincide,
    // and the square root would amplify that noise to ~1e-7. Anything
    // below 1e-11 of the cancelled mass is therefore rounded to zero.
    let inner = mean_term + trace_term;
    let cancelled_mass = mean_term + a.cov.trace().abs() + b.cov.trace().abs();
    let mut value = if inner < 1e-11 * cancelled_mass {
        0.0
    } else {
        inner.sqrt()
    };
    if normalization == Normalization::PerTimestep {
        let steps = dim / a.output_dim;
        value /= (steps as f64).sqrt();
    }
    Ok(DiscrepancyResult {
        value,
        kind: DiscrepancyKind::GaussianW2,
        normalization,
        meta: DiscrepancyMeta::Laws { dim },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample; σ = 1 if that is 0.
    Median,
    Fixed(f64),
}

fn check_samples(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<usize> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::EmptySample(format!(
            "need samples on both sides, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let dim = xs[0].len();
    for v in xs.iter().chain(ys.iter()) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "sample vectors mix lengths {dim} and {}",
                v.len()
            )));
        }
    }
    Ok(dim)
}

fn median_pairwise_distance(pooled: &[&DVector<f64>]) -> f64 {
    let n = pooled.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push((pooled[i] - pooled[j]).norm());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

/// Biased (V-statistic) squared MMD with an RBF kernel
/// k(x,y) = exp(−‖x−y‖²/(2σ²)).
pub fn mmd2_biased(
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    bandwidth: Bandwidth,
) -> Result<DiscrepancyResult> {
    let dim = check_samples(xs, ys)?;
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => {
            if s <= 0.0 {
                return Err(Error::Config(format!("bandwidth must be positive, got {s}")));
            }
            s
        }
        Bandwidth::Median => {
            let pooled: Vec<&DVector<f64>> = xs.iter().chain(ys.iter()).collect();
            let med = median_pairwise_distance(&pooled);
            if med > 0.0 {
                med
            } else {
                1.0
            }
        }
    };
    let denom = 2.0 * sigma * sigma;
    let kernel = |a: &DVector<f64>, b: &DVector<f64>| (-(a - b).norm_squared() / denom).exp();

    let mut kxx = 0.0;
    for x in xs {
        for x2 in xs {
            kxx += kernel(x, x2);
        }
    }
    let mut kyy = 0.0;
    for y in ys {
        for y2 in ys {
            kyy += kernel(y, y2);
        }
    }
    let mut kxy = 0.0;
    for x in xs {
        for y in ys {
            kxy += kernel(x, y);
        }
    }
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let value = (kxx / (nx * nx) + kyy / (ny * ny) - 2.0 * kxy / (nx * ny)).max(0.0);
    Ok(DiscrepancyResult {
        value,
        kind: DiscrepancyKind::Mmd,
        normalization: Normalization::Raw,
        meta: DiscrepancyMeta::Samples {
            n_left: xs.len(),
            n_right: ys.len(),
            dim,
        },
    })
}

/// Energy distance V-statistic:
/// 2·mean‖x−y‖ − mean‖x−x'‖ − mean‖y−y'‖, clamped at 0.
pub fn energy_distance(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<DiscrepancyResult> {
    let dim = check_samples(xs, ys)?;
    let mut dxy = 0.0;
    for x in xs {
        for y in ys {
            dxy += (x - y).norm();
        }
    }
    let mut dxx = 0.0;
    for x in xs {
        for x2 in xs {
            dxx += (x - x2).norm();
        }
    }
    let mut dyy = 0.0;
    for y in ys {
        for y2 in ys {
            dyy += (y - y2).norm();
        }
    }
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let value = (2.0 * dxy / (nx * ny) - dxx / (nx * nx) - dyy / (ny * ny)).max(0.0);
    Ok(DiscrepancyResult {
        value,
        kind: DiscrepancyKind::Energy,
        normalization: Normalization::Raw,
        meta: DiscrepancyMeta::Samples {
            n_left: xs.len(),
            n_right: ys.len(),
            dim,
        },
    })
}

/// Exhaustive total variation ½Σ|a_i − b_i| between two discrete laws on
/// the same enumerated support.
pub fn tv_exhaustive(a: &[f64], b: &[f64]) -> Result<DiscrepancyResult> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "supports have {} vs {} sequences",
            a.len(),
            b.len()
        )));
    }
    for (name, law) in [("left", a), ("right", b)] {
        let sum: f64 = law.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "{name} law sums to {sum}, expected 1 within 1e-9"
            )));
        }
    }
    let value = 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    Ok(DiscrepancyResult {
        value,
        kind: DiscrepancyKind::TvExhaustive,
        normalization: Normalization::Raw,
        meta: DiscrepancyMeta::Support { size: a.len() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn law_1d(mean: f64, var: f64) -> GaussianTrajectoryLaw {
        GaussianTrajectoryLaw {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
            output_dim: 1,
        }
    }

    fn vecs(vals: &[&[f64]]) -> Vec<DVector<f64>> {
        vals.iter().map(|v| DVector::from_column_slice(v)).collect()
    }

    #[test]
    fn w2_identical_laws() {
        let a = law_1d(0.4, 1.3);
        let r = gaussian_w2(&a, &a, Normalization::Raw).unwrap();
        assert!(r.value.abs() < 1e-10);
    }

    #[test]
    fn w2_mean_shift_only() {
        let r = gaussian_w2(&law_1d(0.0, 1.0), &law_1d(3.0, 1.0), Normalization::Raw).unwrap();
        assert_relative_eq!(r.value, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn w2_variance_gap_only() {
        let r = gaussian_w2(&law_1d(0.0, 1.0), &law_1d(0.0, 4.0), Normalization::Raw).unwrap();
        assert_relative_eq!(r.value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn w2_per_timestep_scaling() {
        let a = GaussianTrajectoryLaw {
            mean: DVector::from_column_slice(&[0.0, 0.0, 0.0, 0.0]),
            cov: DMatrix::identity(4, 4),
            output_dim: 1,
        };
        let b = GaussianTrajectoryLaw {
            mean: DVector::from_column_slice(&[2.0, 2.0, 2.0, 2.0]),
            cov: DMatrix::identity(4, 4),
            output_dim: 1,
        };
        let raw = gaussian_w2(&a, &b, Normalization::Raw).unwrap();
        let nrm = gaussian_w2(&a, &b, Normalization::PerTimestep).unwrap();
        assert_relative_eq!(raw.value, 4.0, epsilon = 1e-12);
        assert_relative_eq!(nrm.value, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn w2_symmetry_and_triangle_on_random_1d() {
        let mut rng = crate::seeds::rng_from(4);
        use rand::Rng as _;
        for _ in 0..40 {
            let laws: Vec<GaussianTrajectoryLaw> = (0..3)
                .map(|_| law_1d(rng.gen_range(-2.0..2.0), rng.gen_range(0.1..4.0)))
                .collect();
            let dab = gaussian_w2(&laws[0], &laws[1], Normalization::Raw).unwrap().value;
            let dba = gaussian_w2(&laws[1], &laws[0], Normalization::Raw).unwrap().value;
            let dac = gaussian_w2(&laws[0], &laws[2], Normalization::Raw).unwrap().value;
            let dcb = gaussian_w2(&laws[2], &laws[1], Normalization::Raw).unwrap().value;
            assert!((dab - dba).abs() < 1e-12);
            assert!(dab <= dac + dcb + 1e-9, "{dab} > {dac} + {dcb}");
        }
    }

    #[test]
    fn w2_rejects_indefinite_covariance() {
        let a = law_1d(0.0, 1.0);
        let bad = GaussianTrajectoryLaw {
            mean: DVector::zeros(1),
            cov: DMatrix::from_element(1, 1, -0.5),
            output_dim: 1,
        };
        assert!(matches!(
            gaussian_w2(&a, &bad, Normalization::Raw),
            Err(Error::NotPsd(_))
        ));
    }

    #[test]
    fn mmd_identical_multisets() {
        let xs = vecs(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        let r = mmd2_biased(&xs, &xs, Bandwidth::Median).unwrap();
        assert!(r.value.abs() < 1e-12);
    }

    #[test]
    fn mmd_singleton_formula() {
        let xs = vecs(&[&[0.0]]);
        let ys = vecs(&[&[1.5]]);
        let sigma = 0.8;
        let r = mmd2_biased(&xs, &ys, Bandwidth::Fixed(sigma)).unwrap();
        let expect = 2.0 - 2.0 * (-(1.5f64 * 1.5) / (2.0 * sigma * sigma)).exp();
        assert_relative_eq!(r.value, expect, epsilon = 1e-12);
    }

    #[test]
    fn mmd_median_zero_falls_back() {
        let xs = vecs(&[&[1.0], &[1.0]]);
        let ys = vecs(&[&[1.0], &[1.0]]);
        let r = mmd2_biased(&xs, &ys, Bandwidth::Median).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn mmd_symmetry() {
        let xs = vecs(&[&[0.0], &[1.0], &[2.0]]);
        let ys = vecs(&[&[0.5], &[1.5]]);
        let a = mmd2_biased(&xs, &ys, Bandwidth::Fixed(1.0)).unwrap().value;
        let b = mmd2_biased(&ys, &xs, Bandwidth::Fixed(1.0)).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mmd_empty_sample_rejected() {
        let xs = vecs(&[&[0.0]]);
        assert!(matches!(
            mmd2_biased(&xs, &[], Bandwidth::Median),
            Err(Error::EmptySample(_))
        ));
    }

    #[test]
    fn energy_identical_sets() {
        let xs = vecs(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let r = energy_distance(&xs, &xs).unwrap();
        assert!(r.value.abs() < 1e-12);
    }

    #[test]
    fn energy_point_masses() {
        let xs = vecs(&[&[0.0, 0.0]]);
        let ys = vecs(&[&[3.0, 4.0]]);
        let r = energy_distance(&xs, &ys).unwrap();
        assert_relative_eq!(r.value, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn energy_symmetry() {
        let xs = vecs(&[&[0.0], &[0.5], &[-0.5]]);
        let ys = vecs(&[&[1.0], &[2.0]]);
        let a = energy_distance(&xs, &ys).unwrap().value;
        let b = energy_distance(&ys, &xs).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        let r = tv_exhaustive(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(r.value, 0.0);
        let r = tv_exhaustive(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_relative_eq!(r.value, 1.0, epsilon = 1e-12);
        let r = tv_exhaustive(&[0.5, 0.5], &[0.75, 0.25]).unwrap();
        assert_relative_eq!(r.value, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn tv_rejects_support_mismatch_and_unnormalized() {
        assert!(matches!(
            tv_exhaustive(&[1.0], &[0.5, 0.5]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            tv_exhaustive(&[0.9, 0.2], &[0.5, 0.5]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tv_symmetry() {
        let a = [0.2, 0.3, 0.5];
        let b = [0.4, 0.4, 0.2];
        let x = tv_exhaustive(&a, &b).unwrap().value;
        let y = tv_exhaustive(&b, &a).unwrap().value;
        assert_eq!(x, y);
    }
}
