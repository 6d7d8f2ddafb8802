//! Perturbation policy families: seed-reproducible open-loop generators
//! (constant, step, sinusoid, chirp, PRBS, uniform noise) and a clamped
//! linear-feedback adaptive policy.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::domain::PerturbationSequence;
use crate::error::{Error, Result};
use crate::seeds;

/// Kind-specific policy parameters. Serialized flat alongside the id, e.g.
/// `{"id": "x1", "kind": "prbs", "amplitude": 1.0, "switch_prob": 0.3}`.
/// Unknown kinds are rejected at deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    /// u_t = a·1 for all t.
    Constant { amplitude: f64 },
    /// u_t = 0 for t < step_time, a·1 after.
    Step { amplitude: f64, step_time: usize },
    /// u_{t,j} = a·sin(2πf·t), shared across channels.
    Sinusoid { amplitude: f64, frequency: f64 },
    /// Linear sweep: u_t = a·sin(2π·(f0 + (f1−f0)·t/(2T))·t).
    Chirp { amplitude: f64, f0: f64, f1: f64 },
    /// Each channel holds ±a and flips sign with probability q per step.
    Prbs { amplitude: f64, switch_prob: f64 },
    /// Each entry drawn uniformly on its domain bound interval.
    UniformRandom,
    /// u_t = clamp(K·(y* − y_t)); the only history-dependent kind.
    AdaptiveFeedback {
        gain: Vec<Vec<f64>>,
        setpoint: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPolicy {
    pub id: String,
    #[serde(flatten)]
    pub kind: PolicyKind,
}

impl PerturbationPolicy {
    pub fn is_adaptive(&self) -> bool {
        matches!(self.kind, PolicyKind::AdaptiveFeedback { .. })
    }

    /// Parameter-level invariant violations (empty means valid).
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        match &self.kind {
            PolicyKind::Prbs { switch_prob, .. } => {
                if !(*switch_prob > 0.0 && *switch_prob < 1.0) {
                    v.push(format!(
                        "policy '{}': switch_prob must lie in (0,1)",
                        self.id
                    ));
                }
            }
            PolicyKind::Sinusoid { frequency, .. } => {
                if *frequency <= 0.0 {
                    v.push(format!("policy '{}': frequency must be > 0", self.id));
                }
            }
            PolicyKind::Chirp { f0, f1, .. } => {
                if *f0 <= 0.0 || *f1 <= 0.0 {
                    v.push(format!("policy '{}': f0 and f1 must be > 0", self.id));
                }
            }
            PolicyKind::AdaptiveFeedback { gain, setpoint } => {
                if gain.is_empty() || gain.iter().any(|row| row.len() != setpoint.len()) {
                    v.push(format!(
                        "policy '{}': gain rows must match setpoint length",
                        self.id
                    ));
                }
            }
            _ => {}
        }
        v
    }
}

fn clamp_matrix(values: &mut DMatrix<f64>, bounds: &[(f64, f64)]) {
    for t in 0..values.nrows() {
        for j in 0..values.ncols() {
            let (lo, hi) = bounds[j];
            values[(t, j)] = values[(t, j)].clamp(lo, hi);
        }
    }
}

/// Generate a length-T open-loop sequence. Pure in (policy, T, m, seed);
/// every value is clamped into the bound box post-generation. `bounds`
/// must have length m.
pub fn generate_open_loop(
    policy: &PerturbationPolicy,
    horizon: usize,
    m: usize,
    seed: u64,
    bounds: &[(f64, f64)],
) -> Result<PerturbationSequence> {
    if horizon < 1 {
        return Err(Error::InvalidHorizon(format!(
            "open-loop horizon must be >= 1, got {horizon}"
        )));
    }
    if bounds.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "bounds has {} entries for input_dim {m}",
            bounds.len()
        )));
    }
    let mut values = DMatrix::zeros(horizon, m);
    match &policy.kind {
        PolicyKind::Constant { amplitude } => {
            values.fill(*amplitude);
        }
        PolicyKind::Step {
            amplitude,
            step_time,
        } => {
            for t in *step_time..horizon {
                for j in 0..m {
                    values[(t, j)] = *amplitude;
                }
            }
        }
        PolicyKind::Sinusoid {
            amplitude,
            frequency,
        } => {
            for t in 0..horizon {
                let v = amplitude * (std::f64::consts::TAU * frequency * t as f64).sin();
                for j in 0..m {
                    values[(t, j)] = v;
                }
            }
        }
        PolicyKind::Chirp { amplitude, f0, f1 } => {
            // Instantaneous frequency sweeps linearly f0 -> f1 across the horizon.
            let span = 2.0 * horizon as f64;
            for t in 0..horizon {
                let tf = t as f64;
                let phase = std::f64::consts::TAU * (f0 + (f1 - f0) * tf / span) * tf;
                let v = amplitude * phase.sin();
                for j in 0..m {
                    values[(t, j)] = v;
                }
            }
        }
        PolicyKind::Prbs {
            amplitude,
            switch_prob,
        } => {
            let mut rng = seeds::rng_from(seed);
            for j in 0..m {
                let mut sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                values[(0, j)] = sign * amplitude;
                for t in 1..horizon {
                    if rng.gen_bool(*switch_prob) {
                        sign = -sign;
                    }
                    values[(t, j)] = sign * amplitude;
                }
            }
        }
        PolicyKind::UniformRandom => {
            let mut rng = seeds::rng_from(seed);
            for t in 0..horizon {
                for j in 0..m {
                    let (lo, hi) = bounds[j];
                    values[(t, j)] = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
                }
            }
        }
        PolicyKind::AdaptiveFeedback { .. } => {
            return Err(Error::RequiresFeedback(format!(
                "policy '{}' is adaptive; use adaptive_step in a closed loop",
                policy.id
            )));
        }
    }
    clamp_matrix(&mut values, bounds);
    Ok(PerturbationSequence {
        values,
        policy_id: policy.id.clone(),
        seed,
    })
}

/// One step of the adaptive feedback law: u_t = clamp(K·(y* − y_t), bounds).
/// `history_outputs` is y_{0:t} (t+1 rows); only the row at index t is read.
pub fn adaptive_step(
    policy: &PerturbationPolicy,
    t: usize,
    history_outputs: &DMatrix<f64>,
    bounds: &[(f64, f64)],
) -> Result<Vec<f64>> {
    let (gain, setpoint) = match &policy.kind {
        PolicyKind::AdaptiveFeedback { gain, setpoint } => (gain, setpoint),
        _ => {
            return Err(Error::RequiresFeedback(format!(
                "policy '{}' is open-loop; adaptive_step applies only to adaptive_feedback",
                policy.id
            )))
        }
    };
    if history_outputs.nrows() < t + 1 {
        return Err(Error::DimensionMismatch(format!(
            "history has {} rows, need at least {}",
            history_outputs.nrows(),
            t + 1
        )));
    }
    let p = history_outputs.ncols();
    if setpoint.len() != p || gain.iter().any(|row| row.len() != p) {
        return Err(Error::DimensionMismatch(format!(
            "gain/setpoint expect {} outputs, history has {p}",
            setpoint.len()
        )));
    }
    if gain.len() != bounds.len() {
        return Err(Error::DimensionMismatch(format!(
            "gain has {} rows for input_dim {}",
            gain.len(),
            bounds.len()
        )));
    }
    let y_t = history_outputs.row(t);
    let err = DVector::from_iterator(p, setpoint.iter().zip(y_t.iter()).map(|(s, y)| s - y));
    let mut u = Vec::with_capacity(gain.len());
    for (i, row) in gain.iter().enumerate() {
        let raw: f64 = row.iter().zip(err.iter()).map(|(k, e)| k * e).sum();
        let (lo, hi) = bounds[i];
        u.push(raw.clamp(lo, hi));
    }
    Ok(u)
}
