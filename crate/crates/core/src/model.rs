//! Model-class dispatch: a tagged parameter type covering both system
//! families, plus the shared glue (simulation, exact-law routing, flat
//! trajectory embeddings) the fitting and validation layers build on.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ExperimentalDomain, OutputSpace, Outputs, PerturbationSequence, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::iohmm::{self, IoHmmParams};
use crate::lgss::{self, GaussianTrajectoryLaw, LgssParams};
use crate::seeds;

/// Structural signature of a model family: which parametric class and at
/// what dimensions. This is what a fit starts from before any parameter
/// values exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum ModelClass {
    Lgss {
        state_dim: usize,
        input_dim: usize,
        output_dim: usize,
    },
    Iohmm {
        states: usize,
        inputs: usize,
        outputs: usize,
    },
}

impl ModelClass {
    pub fn of(params: &ModelParams) -> ModelClass {
        match params {
            ModelParams::Lgss(p) => {
                let (n, m, pp) = p.dims();
                ModelClass::Lgss {
                    state_dim: n,
                    input_dim: m,
                    output_dim: pp,
                }
            }
            ModelParams::Iohmm(p) => ModelClass::Iohmm {
                states: p.n_states(),
                inputs: p.n_inputs(),
                outputs: p.n_obs(),
            },
        }
    }

    /// Domain compatibility: input width and output space must line up.
    pub fn check_domain(&self, domain: &ExperimentalDomain) -> Result<()> {
        match *self {
            ModelClass::Lgss {
                input_dim,
                output_dim,
                ..
            } => {
                if input_dim != domain.input_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "model takes {input_dim} input channels, domain provides {}",
                        domain.input_dim
                    )));
                }
                match domain.output_space {
                    OutputSpace::Continuous { dim } if dim == output_dim => Ok(()),
                    _ => Err(Error::DimensionMismatch(format!(
                        "continuous model with {output_dim} channels does not match domain output space"
                    ))),
                }
            }
            ModelClass::Iohmm {
                inputs, outputs, ..
            } => {
                if domain.input_dim != 1 {
                    return Err(Error::DimensionMismatch(
                        "discrete-input models need a single input channel".into(),
                    ));
                }
                let _ = inputs;
                match domain.output_space {
                    OutputSpace::Discrete { size } if size == outputs => Ok(()),
                    _ => Err(Error::DimensionMismatch(format!(
                        "discrete model with {outputs} symbols does not match domain output space"
                    ))),
                }
            }
        }
    }
}

/// Concrete parameters for either model family. Serialized form is tagged
/// by `class` so scenario files and CLI outputs stay self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum ModelParams {
    Lgss(LgssParams),
    Iohmm(IoHmmParams),
}

/// Exact trajectory law where one exists: the Gaussian closed form, or an
/// exhaustively enumerated discrete distribution.
#[derive(Debug, Clone)]
pub enum ExactLaw {
    Gaussian(GaussianTrajectoryLaw),
    Discrete(Vec<f64>),
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelParams::Lgss(p) => p.validate(),
            ModelParams::Iohmm(p) => p.validate(),
        }
    }

    pub fn class(&self) -> ModelClass {
        ModelClass::of(self)
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ModelParams::Iohmm(_))
    }

    /// Output space this model emits into.
    pub fn output_space(&self) -> OutputSpace {
        match self {
            ModelParams::Lgss(p) => OutputSpace::Continuous { dim: p.dims().2 },
            ModelParams::Iohmm(p) => OutputSpace::Discrete { size: p.n_obs() },
        }
    }

    pub fn simulate(&self, seq: &PerturbationSequence, seed: u64) -> Result<TrajectoryRecord> {
        match self {
            ModelParams::Lgss(p) => lgss::simulate(p, seq, seed),
            ModelParams::Iohmm(p) => iohmm::simulate(p, seq, seed),
        }
    }

    /// Exact conditional trajectory law for one input sequence. Errors if
    /// the discrete enumeration is over budget; callers fall back to
    /// sampling in that case.
    pub fn exact_law(&self, seq: &PerturbationSequence) -> Result<ExactLaw> {
        match self {
            ModelParams::Lgss(p) => Ok(ExactLaw::Gaussian(lgss::trajectory_law(p, seq)?)),
            ModelParams::Iohmm(p) => {
                let u = iohmm::symbols_from_sequence(seq, p.n_inputs())?;
                Ok(ExactLaw::Discrete(iohmm::exhaustive_law(p, &u)?))
            }
        }
    }

    /// Average log-likelihood building block: exact per-record loglik.
    pub fn loglik(&self, record: &TrajectoryRecord) -> Result<f64> {
        match self {
            ModelParams::Lgss(p) => {
                let y = record.outputs.as_continuous()?;
                Ok(lgss::kalman_filter(p, &record.inputs, y)?.loglik)
            }
            ModelParams::Iohmm(p) => {
                let u = iohmm::symbols_from_sequence(&record.inputs, p.n_inputs())?;
                let y = record.outputs.as_discrete()?;
                iohmm::forward_loglik(p, &u, y)
            }
        }
    }
}

/// Flat vector embedding of output trajectories, used by the sample-based
/// discrepancies. Continuous outputs stack time-major; discrete outputs
/// one-hot encode each step so Euclidean geometry stays meaningful.
pub fn embed_outputs(outputs: &Outputs, space: &OutputSpace) -> Result<DVector<f64>> {
    match (outputs, space) {
        (Outputs::Continuous(y), OutputSpace::Continuous { dim }) => {
            if y.ncols() != *dim {
                return Err(Error::DimensionMismatch(format!(
                    "trajectory has {} output channels, expected {dim}",
                    y.ncols()
                )));
            }
            Ok(lgss::stack_rows(y))
        }
        (Outputs::Discrete(y), OutputSpace::Discrete { size }) => {
            let mut v = DVector::zeros(y.len() * size);
            for (t, &sym) in y.iter().enumerate() {
                if sym >= *size {
                    return Err(Error::InvalidSymbol(format!(
                        "output symbol {sym} outside alphabet of size {size}"
                    )));
                }
                v[t * size + sym] = 1.0;
            }
            Ok(v)
        }
        _ => Err(Error::DimensionMismatch(
            "output kind does not match the declared output space".into(),
        )),
    }
}

pub fn trajectory_vector(record: &TrajectoryRecord, domain: &ExperimentalDomain) -> Result<DVector<f64>> {
    embed_outputs(&record.outputs, &domain.output_space)
}

/// Distance between two exact laws of the same kind: per-timestep W2 for
/// Gaussians, exhaustive TV for discrete laws.
pub fn law_distance(a: &ExactLaw, b: &ExactLaw) -> Result<crate::discrepancy::DiscrepancyResult> {
    use crate::discrepancy;
    match (a, b) {
        (ExactLaw::Gaussian(x), ExactLaw::Gaussian(y)) => {
            discrepancy::gaussian_w2(x, y, discrepancy::Normalization::PerTimestep)
        }
        (ExactLaw::Discrete(x), ExactLaw::Discrete(y)) => discrepancy::tv_exhaustive(x, y),
        _ => Err(Error::Config(
            "cannot compare a Gaussian law with a discrete law".into(),
        )),
    }
}

/// Random initialization for a fit start. LGSS draws a spectrally damped A
/// so early iterations do not blow up; IOHMM rows are Dirichlet-like
/// normalized positives. Deterministic in (class, seed).
pub fn random_init(class: &ModelClass, seed: u64) -> ModelParams {
    let mut rng = seeds::rng_for(seed, "random_init", 0);
    match *class {
        ModelClass::Lgss {
            state_dim: n,
            input_dim: m,
            output_dim: p,
        } => {
            let mut a = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            // Row-sum bound on the spectral radius keeps the init stable.
            let max_row: f64 = (0..n)
                .map(|i| a.row(i).iter().map(|v: &f64| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
            if max_row > 0.0 {
                a *= 0.7 / max_row.max(0.7);
            }
            let b = nalgebra::DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
            let c = nalgebra::DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = nalgebra::DMatrix::identity(n, n) * rng.gen_range(0.05..0.5);
            let r = nalgebra::DMatrix::identity(p, p) * rng.gen_range(0.05..0.5);
            let mu0 = nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
            let sigma0 = nalgebra::DMatrix::identity(n, n);
            ModelParams::Lgss(LgssParams {
                a,
                b,
                c,
                q,
                r,
                mu0,
                sigma0,
            })
        }
        ModelClass::Iohmm {
            states,
            inputs,
            outputs,
        } => ModelParams::Iohmm(iohmm::random_params(states, inputs, outputs, &mut rng)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ExperimentalDomain;
    use nalgebra::DMatrix;

    fn cont_domain(m: usize, p: usize, horizon: usize) -> ExperimentalDomain {
        ExperimentalDomain {
            input_dim: m,
            output_dim: p,
            input_bounds: vec![(-1.0, 1.0); m],
            output_space: OutputSpace::Continuous { dim: p },
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

    #[test]
    fn class_of_round_trips_dims() {
        let p = ModelParams::Lgss(LgssParams::neutral(3, 2, 1));
        assert_eq!(
            p.class(),
            ModelClass::Lgss {
                state_dim: 3,
                input_dim: 2,
                output_dim: 1
            }
        );
    }

    #[test]
    fn domain_check_catches_mismatches() {
        let cls = ModelClass::Lgss {
            state_dim: 2,
            input_dim: 1,
            output_dim: 1,
        };
        assert!(cls.check_domain(&cont_domain(1, 1, 5)).is_ok());
        assert!(cls.check_domain(&cont_domain(2, 1, 5)).is_err());
        assert!(cls.check_domain(&disc_domain(2, 5)).is_err());

        let dcls = ModelClass::Iohmm {
            states: 2,
            inputs: 2,
            outputs: 3,
        };
        assert!(dcls.check_domain(&disc_domain(3, 5)).is_ok());
        assert!(dcls.check_domain(&disc_domain(2, 5)).is_err());
        assert!(dcls.check_domain(&cont_domain(1, 1, 5)).is_err());
    }

    #[test]
    fn random_init_is_deterministic_and_valid() {
        for cls in [
            ModelClass::Lgss {
                state_dim: 2,
                input_dim: 1,
                output_dim: 1,
            },
            ModelClass::Iohmm {
                states: 2,
                inputs: 2,
                outputs: 2,
            },
        ] {
            let a = random_init(&cls, 9);
            let b = random_init(&cls, 9);
            assert_eq!(a, b);
            a.validate().unwrap();
            assert_eq!(a.class(), cls);
            assert_ne!(a, random_init(&cls, 10));
        }
    }

    #[test]
    fn trajectory_vector_continuous_stacks_time_major() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let rec = TrajectoryRecord {
            inputs: PerturbationSequence {
                values: DMatrix::zeros(1, 1),
                policy_id: "p".into(),
                seed: 0,
            },
            outputs: Outputs::Continuous(y),
            truth_tag: None,
            seed: 0,
        };
        let v = trajectory_vector(&rec, &cont_domain(1, 2, 1)).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn trajectory_vector_one_hot_encodes_discrete() {
        let rec = TrajectoryRecord {
            inputs: PerturbationSequence {
                values: DMatrix::zeros(1, 1),
                policy_id: "p".into(),
                seed: 0,
            },
            outputs: Outputs::Discrete(vec![2, 0]),
            truth_tag: None,
            seed: 0,
        };
        let v = trajectory_vector(&rec, &disc_domain(3, 1)).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let bad = TrajectoryRecord {
            outputs: Outputs::Discrete(vec![3, 0]),
            ..rec
        };
        assert!(trajectory_vector(&bad, &disc_domain(3, 1)).is_err());
    }

    #[test]
    fn model_json_round_trip_is_tagged() {
        let p = ModelParams::Lgss(LgssParams::neutral(2, 1, 1));
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"class\":\"lgss\""));
        let back: ModelParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);

        let mut rng = seeds::rng_from(3);
        let q = ModelParams::Iohmm(iohmm::random_params(2, 2, 2, &mut rng));
        let s = serde_json::to_string(&q).unwrap();
        assert!(s.contains("\"class\":\"iohmm\""));
        let back: ModelParams = serde_json::from_str(&s).unwrap();
        assert_eq!(q, back);
    }

    #[test]
    fn exact_law_routes_by_class() {
        let seq = PerturbationSequence {
            values: DMatrix::zeros(2, 1),
            policy_id: "z".into(),
            seed: 0,
        };
        let g = ModelParams::Lgss(LgssParams::neutral(1, 1, 1));
        match g.exact_law(&seq).unwrap() {
            ExactLaw::Gaussian(law) => assert_eq!(law.dim(), 3),
            _ => panic!("expected gaussian law"),
        }
        let mut rng = seeds::rng_from(7);
        let d = ModelParams::Iohmm(iohmm::random_params(2, 2, 2, &mut rng));
        match d.exact_law(&seq).unwrap() {
            ExactLaw::Discrete(law) => {
                assert_eq!(law.len(), 8);
                assert!((law.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            _ => panic!("expected discrete law"),
        }
    }
}
