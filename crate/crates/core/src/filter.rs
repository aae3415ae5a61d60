//! Sliding-window particle filter.
//!
//! At time index `j` the filter re-simulates every particle over the last
//! `H` observation increments `[j−H, j)` starting from its prior particle at
//! `j−H`, weights it by `w_p·exp(−S_u)`, and reports the weighted estimate
//! at `j`. The prior then moves one step forward: the particles at `j−H+1`
//! with weights `w_p·exp(−S_u(j−H, j−H+1))`.
//!
//! While `j < H` the window simply grows from `t₀` and the filter is plain
//! smoothing from the initial particle set. The first shift happens at
//! `j = H`.
//!
//! When the effective ratio of the posterior weights drops below `γ̄`, the
//! new prior particles are resampled in proportion to the posterior and given
//! prior weights `exp(+S_u(j−H+1, j))` of their ancestor, which cancels the
//! cost of the already-observed part of the next window.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilqr::{SolveReport, SolverOptions};
use crate::lie::UnitQuaternion;
use crate::model::{BodyState, InitialDistribution, ModelParams, ObservationPath};
use crate::path_cost::{step_costs, WeightVector};
use crate::rng;
use crate::smoother::{self, initial_particles, proposal_policy, PolicySource, Proposal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Window length `H`.
    pub window: usize,
    /// Number of particles `K`.
    pub particles: usize,
    /// Resampling threshold `γ̄` on the effective ratio.
    pub gamma_bar: f64,
    pub resampling: bool,
    pub proposal: Proposal,
    pub solver: SolverOptions,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            window: 20,
            particles: 100,
            gamma_bar: 0.1,
            resampling: false,
            proposal: Proposal::Ilqr,
            solver: SolverOptions::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be at least 1".into()));
        }
        if self.particles < 2 {
            return Err(Error::InvalidConfig("at least 2 particles are required".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_bar) {
            return Err(Error::InvalidConfig("gamma_bar must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Prior particles at the window head and their log prior weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub head: usize,
    pub particles: Vec<BodyState>,
    /// Normalized log prior weights, `log w_p`.
    pub log_weights: Vec<f64>,
    /// Solver controls from the previous window, shifted onto this one.
    pub warm_start: Vec<Vector3<f64>>,
}

impl FilterState {
    pub fn initial(particles: Vec<BodyState>) -> Self {
        let k = particles.len();
        Self { head: 0, particles, log_weights: vec![-(k as f64).ln(); k], warm_start: Vec::new() }
    }

    pub fn prior_weights(&self) -> Result<WeightVector> {
        WeightVector::from_log_weights(&self.log_weights)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterEstimate {
    pub index: usize,
    pub time: f64,
    pub quaternion: UnitQuaternion,
    pub xi: Vector3<f64>,
    /// Effective ratio of the posterior weights.
    pub effective_ratio: f64,
    pub resampled: bool,
}

/// Per-window bookkeeping, kept for checks and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub head: usize,
    pub tail: usize,
    /// Log prior weights the window started from.
    pub prior_log_weights: Vec<f64>,
    /// `S_u(j−H, j−H+1)` per particle.
    pub cost_first: Vec<f64>,
    /// `S_u(j−H+1, j)` per particle.
    pub cost_rest: Vec<f64>,
    /// `S_u(j−H, j)` per particle, accumulated independently of the split.
    pub cost_full: Vec<f64>,
    pub posterior: WeightVector,
    /// Ancestor of each new prior particle when resampling fired.
    pub ancestors: Option<Vec<usize>>,
    pub solver: Option<SolveReport>,
}

/// `K` independent categorical draws from normalized `probabilities`.
pub fn resample_multinomial<R: Rng + ?Sized>(probabilities: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut cdf: Vec<f64> = probabilities
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let total = *cdf.last().expect("nonempty probabilities");
    cdf.iter_mut().for_each(|c| *c /= total);
    let last = cdf.len() - 1;
    (0..k)
        .map(|_| {
            let u: f64 = rng.random();
            cdf.partition_point(|c| *c <= u).min(last)
        })
        .collect()
}

/// Copies of the particles chosen by `ancestors`.
pub fn select<T: Clone>(items: &[T], ancestors: &[usize]) -> Vec<T> {
    ancestors.iter().map(|&a| items[a].clone()).collect()
}

fn normalize_log(log_w: &mut [f64]) {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + log_w.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    log_w.iter_mut().for_each(|l| *l -= lse);
}

struct WindowPass {
    next_states: Vec<BodyState>,
    cost_first: Vec<f64>,
    cost_rest: Vec<f64>,
    cost_full: Vec<f64>,
    posterior: WeightVector,
    estimate: (UnitQuaternion, Vector3<f64>),
    solver: Option<SolveReport>,
    planned_controls: Vec<Vector3<f64>>,
}

/// Rolls every prior particle over `[fs.head, tail)` and weights it.
fn window_pass(
    fs: &FilterState,
    obs: &ObservationPath,
    tail: usize,
    p: &ModelParams,
    cfg: &FilterConfig,
    seed: u64,
) -> Result<WindowPass> {
    let window = fs.head..tail;
    smoother::check_window(&window, obs)?;
    let prior = fs.prior_weights()?;
    let source = match cfg.proposal {
        Proposal::Zero => PolicySource::Zero,
        Proposal::Ilqr => PolicySource::Ilqr {
            options: &cfg.solver,
            warm_start: (!fs.warm_start.is_empty()).then_some(fs.warm_start.as_slice()),
        },
    };
    let (policy, solver, planned_controls) =
        proposal_policy(&source, obs, window.clone(), &fs.particles, prior.as_slice(), p)?;
    let records = smoother::sample_trajectories(
        &fs.particles,
        policy.as_ref(),
        window.clone(),
        p,
        seed,
        &[rng::PARTICLE_NOISE, tail as u64],
    );
    let costs = records.par_iter().map(|tr| step_costs(tr, obs, p)).collect::<Result<Vec<_>>>()?;
    let cost_first: Vec<f64> = costs.iter().map(|c| c[0]).collect();
    let cost_rest: Vec<f64> = costs.iter().map(|c| c[1..].iter().sum()).collect();
    let cost_full: Vec<f64> = costs.iter().map(|c| c.iter().sum()).collect();

    let log_post: Vec<f64> = fs.log_weights.iter().zip(&cost_full).map(|(lw, s)| lw - s).collect();
    let posterior = WeightVector::from_log_weights(&log_post)?;
    let tail_states: Vec<BodyState> = records.iter().map(|tr| *tr.last()).collect();
    let next_states: Vec<BodyState> = records.iter().map(|tr| tr.states[1]).collect();
    let estimate = smoother::weighted_mean_state(&tail_states, posterior.as_slice())?;
    Ok(WindowPass { next_states, cost_first, cost_rest, cost_full, posterior, estimate, solver, planned_controls })
}

fn estimate_at(index: usize, p: &ModelParams, pass: &WindowPass, resampled: bool) -> FilterEstimate {
    FilterEstimate {
        index,
        time: index as f64 * p.dt,
        quaternion: pass.estimate.0,
        xi: pass.estimate.1,
        effective_ratio: pass.posterior.effective_ratio(),
        resampled,
    }
}

/// One filtering step for the window ending at `fs.head + H`.
///
/// Resampling draws come from the substream `[RESAMPLE, j]`.
pub fn filter_step(
    fs: &FilterState,
    obs: &ObservationPath,
    p: &ModelParams,
    cfg: &FilterConfig,
    seed: u64,
) -> Result<(FilterEstimate, FilterState, StepDiagnostics)> {
    let tail = fs.head + cfg.window;
    let pass = window_pass(fs, obs, tail, p, cfg, seed)?;
    let gamma = pass.posterior.effective_ratio();

    let mut log_weights: Vec<f64> = fs.log_weights.iter().zip(&pass.cost_first).map(|(lw, s)| lw - s).collect();
    normalize_log(&mut log_weights);
    let mut particles = pass.next_states.clone();
    let mut ancestors = None;
    if cfg.resampling && gamma < cfg.gamma_bar {
        let mut log_probs: Vec<f64> = log_weights.iter().zip(&pass.cost_rest).map(|(lw, s)| lw - s).collect();
        normalize_log(&mut log_probs);
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let mut r = rng::substream(seed, &[rng::RESAMPLE, tail as u64]);
        let a = resample_multinomial(&probs, cfg.particles, &mut r);
        particles = select(&particles, &a);
        log_weights = a.iter().map(|&i| pass.cost_rest[i]).collect();
        normalize_log(&mut log_weights);
        ancestors = Some(a);
    }
    if log_weights.iter().any(|l| !l.is_finite()) {
        return Err(Error::WeightUnderflow);
    }

    let mut warm_start = pass.planned_controls.clone();
    if !warm_start.is_empty() {
        warm_start.remove(0);
        warm_start.push(Vector3::zeros());
    }
    let estimate = estimate_at(tail, p, &pass, ancestors.is_some());
    let diagnostics = StepDiagnostics {
        head: fs.head,
        tail,
        prior_log_weights: fs.log_weights.clone(),
        cost_first: pass.cost_first,
        cost_rest: pass.cost_rest,
        cost_full: pass.cost_full,
        posterior: pass.posterior,
        ancestors,
        solver: pass.solver,
    };
    let next = FilterState { head: fs.head + 1, particles, log_weights, warm_start };
    Ok((estimate, next, diagnostics))
}

/// A full filtering run: one estimate per time index `0..=N` and one
/// diagnostics record per window, warm-up windows included.
#[derive(Clone, Debug)]
pub struct FilterRun {
    pub estimates: Vec<FilterEstimate>,
    pub steps: Vec<StepDiagnostics>,
    pub resampling_events: usize,
    /// Prior after the last step.
    pub state: FilterState,
}

pub fn run_filter(
    obs: &ObservationPath,
    p: &ModelParams,
    d0: &InitialDistribution,
    cfg: &FilterConfig,
    seed: u64,
) -> Result<FilterRun> {
    run_filter_from(obs, p, initial_particles(d0, cfg.particles, seed), cfg, seed)
}

/// As [`run_filter`], from a given initial particle set.
pub fn run_filter_from(
    obs: &ObservationPath,
    p: &ModelParams,
    initial: Vec<BodyState>,
    cfg: &FilterConfig,
    seed: u64,
) -> Result<FilterRun> {
    cfg.validate()?;
    if initial.len() != cfg.particles {
        return Err(Error::InvalidInput(format!("{} initial particles for K = {}", initial.len(), cfg.particles)));
    }
    let k = cfg.particles;
    let mut fs = FilterState::initial(initial);
    let (q0, xi0) = smoother::weighted_mean_state(&fs.particles, &vec![1.0; k])?;
    let mut estimates =
        vec![FilterEstimate { index: 0, time: 0.0, quaternion: q0, xi: xi0, effective_ratio: 1.0, resampled: false }];
    let mut steps = Vec::with_capacity(obs.len());
    let mut resampling_events = 0;
    for j in 1..=obs.len() {
        if j < cfg.window {
            let pass = window_pass(&fs, obs, j, p, cfg, seed)?;
            estimates.push(estimate_at(j, p, &pass, false));
            fs.warm_start = pass.planned_controls.clone();
            steps.push(StepDiagnostics {
                head: 0,
                tail: j,
                prior_log_weights: fs.log_weights.clone(),
                cost_first: pass.cost_first,
                cost_rest: pass.cost_rest,
                cost_full: pass.cost_full,
                posterior: pass.posterior,
                ancestors: None,
                solver: pass.solver,
            });
        } else {
            let (estimate, next, diag) = filter_step(&fs, obs, p, cfg, seed)?;
            resampling_events += usize::from(estimate.resampled);
            estimates.push(estimate);
            steps.push(diag);
            fs = next;
        }
    }
    Ok(FilterRun { estimates, steps, resampling_events, state: fs })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;
    use crate::model::simulate_truth;

    #[test]
    fn degenerate_probabilities_copy_one_particle() {
        let mut r = rng::StreamRng::seed_from_u64(0);
        let mut probs = vec![0.0; 7];
        probs[0] = 1.0;
        assert!(resample_multinomial(&probs, 50, &mut r).iter().all(|&a| a == 0));
        probs[0] = 0.0;
        probs[6] = 1.0;
        assert!(resample_multinomial(&probs, 50, &mut r).iter().all(|&a| a == 6));
    }

    #[test]
    fn uniform_resampling_counts_concentrate() {
        let n = 100_000;
        let m = 10;
        let mut r = rng::substream(1, &[rng::RESAMPLE]);
        let a = resample_multinomial(&vec![0.1; m], n, &mut r);
        let mut counts = vec![0usize; m];
        a.iter().for_each(|&i| counts[i] += 1);
        let mean = n as f64 / m as f64;
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sd, "{c}");
        }
        let again = resample_multinomial(&vec![0.1; m], n, &mut rng::substream(1, &[rng::RESAMPLE]));
        assert_eq!(a, again);
    }

    fn short_run(cfg: &FilterConfig, seed: u64, steps: usize) -> (ModelParams, FilterRun) {
        let p = ModelParams { steps, ..ModelParams::default() };
        let d0 = InitialDistribution::default();
        let truth = simulate_truth(&p, &d0, seed);
        let run = run_filter(&truth.observations, &p, &d0, cfg, seed).unwrap();
        (p, run)
    }

    #[test]
    fn zero_threshold_never_resamples() {
        let cfg = FilterConfig {
            window: 3,
            particles: 30,
            gamma_bar: 0.0,
            resampling: true,
            proposal: Proposal::Zero,
            ..FilterConfig::default()
        };
        let (_, run) = short_run(&cfg, 2, 25);
        assert_eq!(run.resampling_events, 0);
        // Without resampling the prior weights follow the first-step costs.
        for w in run.steps.windows(2).skip(2) {
            let (a, b) = (&w[0], &w[1]);
            let mut expected: Vec<f64> = a.prior_log_weights.iter().zip(&a.cost_first).map(|(l, s)| l - s).collect();
            normalize_log(&mut expected);
            for (x, y) in expected.iter().zip(&b.prior_log_weights) {
                assert_relative_eq!(*x, *y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn bookkeeping_invariants() {
        let cfg = FilterConfig {
            window: 4,
            particles: 40,
            gamma_bar: 0.5,
            resampling: true,
            proposal: Proposal::Ilqr,
            ..FilterConfig::default()
        };
        let (_, run) = short_run(&cfg, 3, 30);
        assert_eq!(run.estimates.len(), 31);
        assert!(run.resampling_events > 0);
        for (i, e) in run.estimates.iter().enumerate() {
            assert_eq!(e.index, i);
            assert!((e.quaternion.norm() - 1.0).abs() < 1e-12);
            assert!(e.effective_ratio >= 1.0 / 40.0 - 1e-12 && e.effective_ratio <= 1.0 + 1e-12);
        }
        for (s, next) in run.steps.iter().zip(run.steps.iter().skip(1)) {
            for k in 0..40 {
                assert_relative_eq!(s.cost_first[k] + s.cost_rest[k], s.cost_full[k], epsilon = 1e-10);
            }
            assert_relative_eq!(s.posterior.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            if let Some(a) = &s.ancestors {
                // Reweighting the resampled prior by the ancestors' cached
                // rest-of-window costs gives back uniform weights.
                let lw: Vec<f64> = next.prior_log_weights.iter().zip(a).map(|(l, &i)| l - s.cost_rest[i]).collect();
                let w = WeightVector::from_log_weights(&lw).unwrap();
                assert!(w.iter().all(|x| (x - 1.0 / 40.0).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn reruns_are_bit_identical() {
        let cfg =
            FilterConfig { window: 5, particles: 20, resampling: true, gamma_bar: 0.3, ..FilterConfig::default() };
        let (_, a) = short_run(&cfg, 4, 20);
        let (_, b) = short_run(&cfg, 4, 20);
        assert_eq!(a.estimates, b.estimates);
    }

    #[test]
    fn full_window_equals_smoothing() {
        let n = 12;
        let cfg = FilterConfig { window: n, particles: 25, proposal: Proposal::Zero, ..FilterConfig::default() };
        let p = ModelParams { steps: n, ..ModelParams::default() };
        let d0 = InitialDistribution::default();
        let truth = simulate_truth(&p, &d0, 5);
        let run = run_filter(&truth.observations, &p, &d0, &cfg, 8).unwrap();
        let sm = smoother::smooth(
            &truth.observations,
            0..n,
            smoother::InitialParticles::Prior(&d0),
            PolicySource::Zero,
            25,
            &p,
            8,
        )
        .unwrap();
        let posterior = &run.steps.last().unwrap().posterior;
        for (a, b) in posterior.iter().zip(sm.weights.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
        let tails: Vec<BodyState> = sm.particles.iter().map(|tr| *tr.last()).collect();
        let (q, xi) = smoother::weighted_mean_state(&tails, sm.weights.as_slice()).unwrap();
        let last = run.estimates.last().unwrap();
        assert_relative_eq!(last.quaternion.as_vector(), q.as_vector(), epsilon = 1e-12);
        assert_relative_eq!(last.xi, xi, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        let p = ModelParams { steps: 5, ..ModelParams::default() };
        let d0 = InitialDistribution::default();
        let obs = simulate_truth(&p, &d0, 0).observations;
        for cfg in [
            FilterConfig { window: 0, ..FilterConfig::default() },
            FilterConfig { particles: 1, ..FilterConfig::default() },
            FilterConfig { gamma_bar: 1.5, ..FilterConfig::default() },
        ] {
            assert!(matches!(run_filter(&obs, &p, &d0, &cfg, 0), Err(Error::InvalidConfig(_))));
        }
    }

    proptest! {
        #[test]
        fn resampling_only_picks_supported_particles(
            raw in prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], 1..40),
            k in 1usize..200,
            seed in any::<u64>(),
        ) {
            prop_assume!(raw.iter().any(|w| *w > 0.0));
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let a = resample_multinomial(&probs, k, &mut rng::StreamRng::seed_from_u64(seed));
            prop_assert_eq!(a.len(), k);
            prop_assert!(a.iter().all(|&i| probs[i] > 0.0));
            prop_assert_eq!(a, resample_multinomial(&probs, k, &mut rng::StreamRng::seed_from_u64(seed)));
        }
    }
}
