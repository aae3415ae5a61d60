//! Discrete path cost of a controlled trajectory and the importance weights
//! built from it.
//!
//! For a trajectory over the step window `[a, b)` the cost is
//!
//! ```text
//! S_u(a, b) = Σ_i [½‖u_i‖² + ‖h_i‖²/(2σ_B²)]·dt − h_iᵀΔY_i/σ_B² + √dt·u_iᵀε_i
//! ```
//!
//! where `ε_i` is the standard normal draw that drove step `i`. A trajectory
//! weighted by `exp(−S_u)` is a sample from the smoothing posterior no matter
//! which control produced it.

use std::ops::Range;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::model::{observe, BodyState, ModelParams, Observation, ObservationPath};

/// A simulated trajectory together with the controls and noise draws that
/// produced it. `states[0]` sits at time index `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub start: usize,
    pub states: Vec<BodyState>,
    pub controls: Vec<Vector3<f64>>,
    pub noises: Vec<Vector3<f64>>,
}

impl TrajectoryRecord {
    pub fn window(&self) -> Range<usize> {
        self.start..self.start + self.controls.len()
    }

    pub fn last(&self) -> &BodyState {
        self.states.last().expect("a trajectory has at least one state")
    }

    /// State at absolute time index `i`.
    pub fn state_at(&self, i: usize) -> Option<&BodyState> {
        i.checked_sub(self.start).and_then(|k| self.states.get(k))
    }

    fn check(&self) -> Result<()> {
        let n = self.controls.len();
        if self.states.len() != n + 1 || self.noises.len() != n {
            return Err(Error::BadTrajectory(format!(
                "{} states, {} controls, {} noises",
                self.states.len(),
                n,
                self.noises.len()
            )));
        }
        Ok(())
    }
}

/// Cost contribution of a single step.
pub fn step_cost(state: &BodyState, u: &Vector3<f64>, eps: &Vector3<f64>, dy: &Observation, p: &ModelParams) -> f64 {
    step_cost_from_h(&observe(state, p), u, eps, dy, p)
}

/// Single-step cost given the observation function value `h`.
pub fn step_cost_from_h(
    h: &Observation,
    u: &Vector3<f64>,
    eps: &Vector3<f64>,
    dy: &Observation,
    p: &ModelParams,
) -> f64 {
    let inv_var = 1.0 / (p.sigma_obs * p.sigma_obs);
    (0.5 * u.norm_squared() + 0.5 * inv_var * h.norm_squared()) * p.dt - inv_var * h.dot(dy) + p.dt.sqrt() * u.dot(eps)
}

/// Per-step costs over the record's whole window.
pub fn step_costs(tr: &TrajectoryRecord, obs: &ObservationPath, p: &ModelParams) -> Result<Vec<f64>> {
    tr.check()?;
    let w = tr.window();
    if w.end > obs.len() {
        return Err(Error::WindowOutOfRange { start: w.start, end: w.end, available: obs.len() });
    }
    Ok(w.clone()
        .enumerate()
        .map(|(k, i)| step_cost(&tr.states[k], &tr.controls[k], &tr.noises[k], &obs.increments[i], p))
        .collect())
}

/// `S_u` over the record's whole window.
pub fn path_cost(tr: &TrajectoryRecord, obs: &ObservationPath, p: &ModelParams) -> Result<f64> {
    Ok(step_costs(tr, obs, p)?.iter().sum())
}

/// `S_u` over a sub-window given in absolute time indices.
pub fn path_cost_range(
    tr: &TrajectoryRecord,
    obs: &ObservationPath,
    p: &ModelParams,
    range: Range<usize>,
) -> Result<f64> {
    let w = tr.window();
    if range.start < w.start || range.end > w.end || range.start > range.end {
        return Err(Error::WindowOutOfRange { start: range.start, end: range.end, available: w.end });
    }
    let costs = step_costs(tr, obs, p)?;
    Ok(costs[range.start - w.start..range.end - w.start].iter().sum())
}

/// Normalized nonnegative particle weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// Normalizes `exp(log_w)` after subtracting the maximum.
    pub fn from_log_weights(log_w: &[f64]) -> Result<Self> {
        if log_w.is_empty() {
            return Err(Error::InvalidInput("no weights".into()));
        }
        if log_w.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::WeightUnderflow);
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::WeightUnderflow);
        }
        let mut w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        Ok(Self(w))
    }

    /// Normalizes nonnegative weights.
    pub fn from_unnormalized(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroWeights);
        }
        Ok(Self(w.into_iter().map(|x| x / total).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn effective_ratio(&self) -> f64 {
        effective_ratio(self)
    }
}

/// `wᵏ ∝ ratioᵏ·exp(−costᵏ)`, evaluated in log space.
pub fn weights_from_costs(costs: &[f64], prior_ratios: &[f64]) -> Result<WeightVector> {
    if costs.len() != prior_ratios.len() {
        return Err(Error::InvalidInput(format!("{} costs but {} prior ratios", costs.len(), prior_ratios.len())));
    }
    if prior_ratios.iter().any(|r| r.is_nan() || *r <= 0.0) {
        return Err(Error::InvalidInput("prior ratios must be positive".into()));
    }
    let log_w: Vec<f64> = costs.iter().zip(prior_ratios).map(|(c, r)| r.ln() - c).collect();
    WeightVector::from_log_weights(&log_w)
}

/// `γ = 1/(K·Σwᵢ²)`, in `[1/K, 1]`.
pub fn effective_ratio(w: &WeightVector) -> f64 {
    let sum_sq: f64 = w.iter().map(|x| x * x).sum();
    1.0 / (w.len() as f64 * sum_sq)
}
