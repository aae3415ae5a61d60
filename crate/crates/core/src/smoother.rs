//! Path-integral smoothing over one observation window.
//!
//! `K` trajectories are rolled forward under a control policy with fresh
//! noise, and each is weighted by `exp(−S_u)`. Zero control is the
//! uncontrolled proposal; an iLQR policy computed from the window's
//! observations steers particles toward the data.

use std::ops::Range;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilqr::{self, AttitudeProblem, ControlPolicy, SolveReport, SolverOptions};
use crate::lie::{to_quaternion, weighted_quaternion_mean, UnitQuaternion};
use crate::model::{
    sample_initial, standard_normal3, step_state, BodyState, InitialDistribution, ModelParams, ObservationPath,
};
use crate::path_cost::{step_costs, weights_from_costs, TrajectoryRecord, WeightVector};
use crate::rng;

/// How the proposal control is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proposal {
    Zero,
    Ilqr,
}

impl std::str::FromStr for Proposal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "ilqr" => Ok(Self::Ilqr),
            other => Err(Error::InvalidConfig(format!("unknown algorithm {other:?}, expected zero or ilqr"))),
        }
    }
}

impl std::fmt::Display for Proposal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Zero => "zero",
            Self::Ilqr => "ilqr",
        })
    }
}

pub enum PolicySource<'a> {
    Zero,
    /// Solve iLQR on the window from the weighted mean of the initial particles.
    Ilqr {
        options: &'a SolverOptions,
        warm_start: Option<&'a [Vector3<f64>]>,
    },
    Given(&'a ControlPolicy),
}

pub enum InitialParticles<'a> {
    /// Draw `K` particles from `ν₀`.
    Prior(&'a InitialDistribution),
    Particles(&'a [BodyState]),
}

#[derive(Clone, Debug)]
pub struct SmoothingResult {
    pub window: Range<usize>,
    pub particles: Vec<TrajectoryRecord>,
    /// Per-particle, per-step costs.
    pub step_costs: Vec<Vec<f64>>,
    /// Per-particle `S_u` over the whole window.
    pub costs: Vec<f64>,
    pub weights: WeightVector,
    pub effective_ratio: f64,
    pub policy: Option<ControlPolicy>,
    pub solver: Option<SolveReport>,
    /// Controls of the solver's final noiseless rollout.
    pub planned_controls: Vec<Vector3<f64>>,
}

/// `K` draws from `ν₀`, particle `k` from its own substream.
pub fn initial_particles(d0: &InitialDistribution, k: usize, seed: u64) -> Vec<BodyState> {
    (0..k).into_par_iter().map(|i| sample_initial(d0, &mut rng::substream(seed, &[rng::INITIAL, i as u64]))).collect()
}

/// Rolls one particle over `window` with controls from `policy` (zero if none).
pub fn rollout_particle<R: rand::Rng + ?Sized>(
    x0: &BodyState,
    policy: Option<&ControlPolicy>,
    window: Range<usize>,
    p: &ModelParams,
    rng: &mut R,
) -> TrajectoryRecord {
    let n = window.len();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut noises = Vec::with_capacity(n);
    let mut x = *x0;
    states.push(x);
    for i in window.clone() {
        let u = policy.map_or_else(Vector3::zeros, |pi| pi.eval(&x, i));
        let eps = standard_normal3(rng);
        x = step_state(&x, &u, &eps, p);
        states.push(x);
        controls.push(u);
        noises.push(eps);
    }
    TrajectoryRecord { start: window.start, states, controls, noises }
}

/// One rollout per initial particle. Particle `k` draws its noise from the
/// substream keyed by `keys` followed by `k`, so the result does not depend
/// on scheduling.
pub fn sample_trajectories(
    initial: &[BodyState],
    policy: Option<&ControlPolicy>,
    window: Range<usize>,
    p: &ModelParams,
    seed: u64,
    keys: &[u64],
) -> Vec<TrajectoryRecord> {
    initial
        .par_iter()
        .enumerate()
        .map(|(k, x0)| {
            let mut path = keys.to_vec();
            path.push(k as u64);
            rollout_particle(x0, policy, window.clone(), p, &mut rng::substream(seed, &path))
        })
        .collect()
}

/// Weighted quaternion mean of the rotations and weighted mean of velocities.
pub fn weighted_mean_state(states: &[BodyState], weights: &[f64]) -> Result<(UnitQuaternion, Vector3<f64>)> {
    let qs: Vec<UnitQuaternion> = states.iter().map(|s| to_quaternion(&s.g)).collect();
    let q = weighted_quaternion_mean(&qs, weights)?;
    let total: f64 = weights.iter().sum();
    let xi = states.iter().zip(weights).fold(Vector3::zeros(), |acc, (s, w)| acc + s.xi * *w) / total;
    Ok((q, xi))
}

/// iLQR over `window` starting from `x0`.
pub fn solve_window(
    obs: &ObservationPath,
    window: Range<usize>,
    x0: &BodyState,
    p: &ModelParams,
    options: &SolverOptions,
    warm_start: Option<&[Vector3<f64>]>,
) -> Result<ilqr::Solution<BodyState>> {
    check_window(&window, obs)?;
    let problem = AttitudeProblem::new(p, &obs.increments[window.clone()]);
    Ok(ilqr::solve(&problem, x0, window.start, warm_start, options))
}

pub(crate) fn check_window(window: &Range<usize>, obs: &ObservationPath) -> Result<()> {
    if window.is_empty() || window.end > obs.len() {
        return Err(Error::WindowOutOfRange { start: window.start, end: window.end, available: obs.len() });
    }
    Ok(())
}

/// Policy, solver diagnostics and planned controls of one proposal.
pub(crate) type ProposalPlan = (Option<ControlPolicy>, Option<SolveReport>, Vec<Vector3<f64>>);

/// The policy a proposal uses on `window`, started from the weighted mean of
/// `initial`.
pub(crate) fn proposal_policy(
    source: &PolicySource<'_>,
    obs: &ObservationPath,
    window: Range<usize>,
    initial: &[BodyState],
    weights: &[f64],
    p: &ModelParams,
) -> Result<ProposalPlan> {
    match source {
        PolicySource::Zero => Ok((None, None, Vec::new())),
        PolicySource::Given(policy) => Ok((Some((*policy).clone()), None, policy.nominal_controls.clone())),
        PolicySource::Ilqr { options, warm_start } => {
            let (q, xi) = weighted_mean_state(initial, weights)?;
            let x0 = BodyState::new(q.to_rotation(), xi);
            let sol = solve_window(obs, window, &x0, p, options, *warm_start)?;
            Ok((Some(sol.policy), Some(sol.report), sol.trajectory.controls))
        }
    }
}

/// Smoothing over `window` with `k` particles.
///
/// Noise for particle `i` comes from the substream `[PARTICLE_NOISE,
/// window.end, i]`, the same stream the filter uses for the window ending at
/// `window.end`.
pub fn smooth(
    obs: &ObservationPath,
    window: Range<usize>,
    initial: InitialParticles<'_>,
    source: PolicySource<'_>,
    k: usize,
    p: &ModelParams,
    seed: u64,
) -> Result<SmoothingResult> {
    if k == 0 {
        return Err(Error::InvalidInput("at least one particle is required".into()));
    }
    check_window(&window, obs)?;
    let initial = match initial {
        InitialParticles::Prior(d0) => initial_particles(d0, k, seed),
        InitialParticles::Particles(xs) if xs.len() == k => xs.to_vec(),
        InitialParticles::Particles(xs) => {
            return Err(Error::InvalidInput(format!("{} initial particles for K = {k}", xs.len())))
        }
    };
    let uniform = vec![1.0; k];
    let (policy, solver, planned_controls) = proposal_policy(&source, obs, window.clone(), &initial, &uniform, p)?;
    let particles = sample_trajectories(
        &initial,
        policy.as_ref(),
        window.clone(),
        p,
        seed,
        &[rng::PARTICLE_NOISE, window.end as u64],
    );
    let step_costs = particles.par_iter().map(|tr| step_costs(tr, obs, p)).collect::<Result<Vec<_>>>()?;
    let costs: Vec<f64> = step_costs.iter().map(|c| c.iter().sum()).collect();
    let weights = weights_from_costs(&costs, &uniform)?;
    let effective_ratio = weights.effective_ratio();
    Ok(SmoothingResult {
        window,
        particles,
        step_costs,
        costs,
        weights,
        effective_ratio,
        policy,
        solver,
        planned_controls,
    })
}
