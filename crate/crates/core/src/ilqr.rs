//! Iterative LQR in 6-dim local coordinates.
//!
//! States are perturbed on the right, `g·exp(η)`, and velocities additively,
//! so a perturbation is `(η, δξ) ∈ ℝ⁶`. Dynamics Jacobians are central
//! finite differences of the noiseless step map in these coordinates; the
//! stage cost is expanded Gauss–Newton style.
//!
//! The solver works on any [`ControlProblem`]. [`AttitudeProblem`] is the
//! deterministic surrogate of the smoothing problem on one observation
//! window; [`LinearQuadraticProblem`] is an exactly linear-quadratic problem
//! on which one iteration is exact.

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{LogBranch, Rotation};
use crate::model::{observe, step_state, BodyState, ModelParams, Observation};
use crate::path_cost::step_cost_from_h;

pub type Matrix6x3 = SMatrix<f64, 6, 3>;
pub type Matrix3x6 = SMatrix<f64, 3, 6>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// A state space with a 6-dim local chart.
pub trait Manifold: Clone + Send + Sync {
    fn retract(&self, d: &Vector6<f64>) -> Self;

    /// Chart coordinates of `self` around `reference`, so that
    /// `reference.retract(&self.local_error(reference)?) == self`.
    fn local_error(&self, reference: &Self) -> Result<Vector6<f64>>;
}

/// Rotation and velocity perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LocalCoords {
    pub eta: Vector3<f64>,
    pub delta_xi: Vector3<f64>,
}

impl LocalCoords {
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self { eta: v.fixed_rows::<3>(0).into_owned(), delta_xi: v.fixed_rows::<3>(3).into_owned() }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.eta);
        v.fixed_rows_mut::<3>(3).copy_from(&self.delta_xi);
        v
    }
}

/// `(g·exp(η), ξ + δξ)`
pub fn retract(s: &BodyState, d: &LocalCoords) -> BodyState {
    BodyState { g: s.g * Rotation::exp(&d.eta), xi: s.xi + d.delta_xi }
}

/// `(log(refᵀ·g), ξ − ref.ξ)`; fails when the relative rotation is a half turn.
pub fn local_error(s: &BodyState, reference: &BodyState) -> Result<LocalCoords> {
    let (eta, branch) = (reference.g.transpose() * s.g).log_with_branch();
    if branch == LogBranch::NearPi {
        return Err(Error::AntipodalRotation);
    }
    Ok(LocalCoords { eta, delta_xi: s.xi - reference.xi })
}

impl Manifold for BodyState {
    fn retract(&self, d: &Vector6<f64>) -> Self {
        retract(self, &LocalCoords::from_vector(d))
    }

    fn local_error(&self, reference: &Self) -> Result<Vector6<f64>> {
        local_error(self, reference).map(|c| c.to_vector())
    }
}

impl Manifold for Vector6<f64> {
    fn retract(&self, d: &Vector6<f64>) -> Self {
        self + d
    }

    fn local_error(&self, reference: &Self) -> Result<Vector6<f64>> {
        Ok(self - reference)
    }
}

/// Second-order expansion of one stage cost in local coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct StageQuadratic {
    pub lx: Vector6<f64>,
    pub lu: Vector3<f64>,
    pub lxx: Matrix6<f64>,
    pub luu: Matrix3<f64>,
    pub lux: Matrix3x6,
}

/// Finite-horizon discrete optimal-control problem with 3 controls.
pub trait ControlProblem: Sync {
    type State: Manifold;

    fn horizon(&self) -> usize;

    /// Noiseless transition at stage `i ∈ [0, horizon)`.
    fn step(&self, i: usize, x: &Self::State, u: &Vector3<f64>) -> Self::State;

    fn stage_cost(&self, i: usize, x: &Self::State, u: &Vector3<f64>) -> f64;

    fn terminal_cost(&self, _x: &Self::State) -> f64 {
        0.0
    }

    fn linearize(&self, i: usize, x: &Self::State, u: &Vector3<f64>) -> (Matrix6<f64>, Matrix6x3) {
        linearize_dynamics(self, i, x, u, FD_STEP)
    }

    fn quadratize(&self, i: usize, x: &Self::State, u: &Vector3<f64>) -> StageQuadratic;

    /// Gradient and Hessian of the terminal cost.
    fn terminal_quadratic(&self, _x: &Self::State) -> (Vector6<f64>, Matrix6<f64>) {
        (Vector6::zeros(), Matrix6::zeros())
    }
}

/// Central-difference Jacobians of the step map in local coordinates.
pub fn linearize_dynamics<P: ControlProblem + ?Sized>(
    problem: &P,
    i: usize,
    x: &P::State,
    u: &Vector3<f64>,
    h: f64,
) -> (Matrix6<f64>, Matrix6x3) {
    let reference = problem.step(i, x, u);
    let chart =
        |y: &P::State| y.local_error(&reference).expect("finite-difference perturbation stays inside the chart");
    let mut a = Matrix6::zeros();
    for j in 0..6 {
        let d = Vector6::ith(j, h);
        let plus = chart(&problem.step(i, &x.retract(&d), u));
        let minus = chart(&problem.step(i, &x.retract(&-d), u));
        a.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    let mut b = Matrix6x3::zeros();
    for j in 0..3 {
        let d = Vector3::ith(j, h);
        let plus = chart(&problem.step(i, x, &(u + d)));
        let minus = chart(&problem.step(i, x, &(u - d)));
        b.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    (a, b)
}

/// The deterministic surrogate of the smoothing problem on one window.
///
/// Stage `i` costs `½‖u‖² + ‖h‖²/(2σ_B²) − hᵀΔY_i/(σ_B²·dt)`, which is the
/// discrete path cost of that step without its stochastic-integral term,
/// divided by `dt`.
#[derive(Clone, Debug)]
pub struct AttitudeProblem<'a> {
    pub params: &'a ModelParams,
    /// Observation increments of the window, one per stage.
    pub increments: &'a [Observation],
    /// Levenberg term added to the Gauss–Newton state Hessian.
    pub regularization: f64,
}

impl<'a> AttitudeProblem<'a> {
    pub const MIN_REGULARIZATION: f64 = 1e-6;

    pub fn new(params: &'a ModelParams, increments: &'a [Observation]) -> Self {
        Self { params, increments, regularization: Self::MIN_REGULARIZATION }
    }

    /// Central-difference Jacobian of `h` in local coordinates.
    pub fn observation_jacobian(&self, x: &BodyState, h: f64) -> Matrix9x6 {
        let mut jac = Matrix9x6::zeros();
        for j in 0..6 {
            let d = Vector6::ith(j, h);
            let plus = observe(&x.retract(&d), self.params);
            let minus = observe(&x.retract(&-d), self.params);
            jac.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        jac
    }
}

impl ControlProblem for AttitudeProblem<'_> {
    type State = BodyState;

    fn horizon(&self) -> usize {
        self.increments.len()
    }

    fn step(&self, _i: usize, x: &BodyState, u: &Vector3<f64>) -> BodyState {
        step_state(x, u, &Vector3::zeros(), self.params)
    }

    fn stage_cost(&self, i: usize, x: &BodyState, u: &Vector3<f64>) -> f64 {
        let h = observe(x, self.params);
        step_cost_from_h(&h, u, &Vector3::zeros(), &self.increments[i], self.params) / self.params.dt
    }

    fn quadratize(&self, i: usize, x: &BodyState, u: &Vector3<f64>) -> StageQuadratic {
        let inv_var = 1.0 / (self.params.sigma_obs * self.params.sigma_obs);
        let y = self.increments[i] / self.params.dt;
        let residual = observe(x, self.params) - y;
        let jac = self.observation_jacobian(x, FD_STEP);
        let lxx =
            jac.transpose() * jac * inv_var + Matrix6::identity() * self.regularization.max(Self::MIN_REGULARIZATION);
        StageQuadratic {
            lx: jac.transpose() * residual * inv_var,
            lu: *u,
            lxx,
            luu: Matrix3::identity(),
            lux: Matrix3x6::zeros(),
        }
    }
}

/// Linear dynamics `x' = Ax + Bu + c` on ℝ⁶ with quadratic tracking cost
/// `½(x − r_i)ᵀQ(x − r_i) + ½uᵀRu` and terminal `½(x − r_N)ᵀQ_f(x − r_N)`.
#[derive(Clone, Debug)]
pub struct LinearQuadraticProblem {
    pub a: Matrix6<f64>,
    pub b: Matrix6x3,
    pub c: Vector6<f64>,
    pub q: Matrix6<f64>,
    pub r: Matrix3<f64>,
    pub q_final: Matrix6<f64>,
    /// `horizon + 1` reference states.
    pub references: Vec<Vector6<f64>>,
}

impl ControlProblem for LinearQuadraticProblem {
    type State = Vector6<f64>;

    fn horizon(&self) -> usize {
        self.references.len() - 1
    }

    fn step(&self, _i: usize, x: &Vector6<f64>, u: &Vector3<f64>) -> Vector6<f64> {
        self.a * x + self.b * u + self.c
    }

    fn stage_cost(&self, i: usize, x: &Vector6<f64>, u: &Vector3<f64>) -> f64 {
        let e = x - self.references[i];
        0.5 * e.dot(&(self.q * e)) + 0.5 * u.dot(&(self.r * u))
    }

    fn terminal_cost(&self, x: &Vector6<f64>) -> f64 {
        let e = x - self.references[self.horizon()];
        0.5 * e.dot(&(self.q_final * e))
    }

    fn linearize(&self, _i: usize, _x: &Vector6<f64>, _u: &Vector3<f64>) -> (Matrix6<f64>, Matrix6x3) {
        (self.a, self.b)
    }

    fn quadratize(&self, i: usize, x: &Vector6<f64>, u: &Vector3<f64>) -> StageQuadratic {
        StageQuadratic {
            lx: self.q * (x - self.references[i]),
            lu: self.r * u,
            lxx: self.q,
            luu: self.r,
            lux: Matrix3x6::zeros(),
        }
    }

    fn terminal_quadratic(&self, x: &Vector6<f64>) -> (Vector6<f64>, Matrix6<f64>) {
        (self.q_final * (x - self.references[self.horizon()]), self.q_final)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop once the relative cost improvement falls below this.
    pub tol: f64,
    /// First nonzero `Quu` regularization after a failed pass.
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub max_escalations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-6, lambda_init: 1e-6, lambda_factor: 10.0, max_escalations: 8 }
    }
}

/// Line-search step sizes, largest first.
pub const STEP_SIZES: [f64; 7] = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];

/// Time-varying affine feedback law around a nominal trajectory:
/// `u = ū_i + k_i + K_i·(x ⊖ x̄_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPolicy<S = BodyState> {
    /// Absolute time index of the first stage.
    pub start: usize,
    /// `horizon + 1` states.
    pub nominal_states: Vec<S>,
    pub nominal_controls: Vec<Vector3<f64>>,
    pub feedforward: Vec<Vector3<f64>>,
    pub feedback: Vec<Matrix3x6>,
}

impl<S: Manifold> ControlPolicy<S> {
    pub fn horizon(&self) -> usize {
        self.nominal_controls.len()
    }

    pub fn window(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.horizon()
    }

    /// Control at absolute index `i`. Falls back to the feedforward part when
    /// `x` cannot be expressed in the nominal's chart.
    pub fn eval(&self, x: &S, i: usize) -> Vector3<f64> {
        let k = i - self.start;
        let open_loop = self.nominal_controls[k] + self.feedforward[k];
        match x.local_error(&self.nominal_states[k]) {
            Ok(dx) => open_loop + self.feedback[k] * dx,
            Err(_) => open_loop,
        }
    }

    /// Open-loop policy replaying `controls` along `states`.
    pub fn open_loop(start: usize, states: Vec<S>, controls: Vec<Vector3<f64>>) -> Self {
        let n = controls.len();
        Self {
            start,
            nominal_states: states,
            nominal_controls: controls,
            feedforward: vec![Vector3::zeros(); n],
            feedback: vec![Matrix3x6::zeros(); n],
        }
    }
}

pub fn policy_eval(policy: &ControlPolicy, s: &BodyState, i: usize) -> Vector3<f64> {
    policy.eval(s, i)
}

/// A noiseless trajectory and its total cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout<S> {
    pub states: Vec<S>,
    pub controls: Vec<Vector3<f64>>,
    pub cost: f64,
}

pub fn rollout<P: ControlProblem>(problem: &P, x0: &P::State, controls: &[Vector3<f64>]) -> Rollout<P::State> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut x = x0.clone();
    let mut cost = 0.0;
    for (i, u) in controls.iter().enumerate() {
        cost += problem.stage_cost(i, &x, u);
        let next = problem.step(i, &x, u);
        states.push(std::mem::replace(&mut x, next));
    }
    cost += problem.terminal_cost(&x);
    states.push(x);
    Rollout { states, controls: controls.to_vec(), cost }
}

/// Feedforward and feedback gains from one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Gains {
    pub feedforward: Vec<Vector3<f64>>,
    pub feedback: Vec<Matrix3x6>,
    /// `Quu` regularization that succeeded.
    pub lambda: f64,
    /// Value-function Hessians, `horizon + 1` of them.
    pub value_hessians: Vec<Matrix6<f64>>,
}

/// Riccati recursion over the linearized dynamics and quadratized costs.
///
/// The first attempt adds nothing to `Quu`; if a `Quu` is not positive
/// definite the pass restarts with `λ = lambda_init`, then ×`lambda_factor`,
/// up to `max_escalations` times.
pub fn backward_pass(
    dynamics: &[(Matrix6<f64>, Matrix6x3)],
    costs: &[StageQuadratic],
    terminal: &(Vector6<f64>, Matrix6<f64>),
    opts: &SolverOptions,
) -> Result<Gains> {
    assert_eq!(dynamics.len(), costs.len());
    let mut lambda = 0.0;
    for escalation in 0..=opts.max_escalations {
        if let Some(gains) = try_backward_pass(dynamics, costs, terminal, lambda) {
            return Ok(gains);
        }
        lambda = if escalation == 0 { opts.lambda_init } else { lambda * opts.lambda_factor };
    }
    Err(Error::BackwardPass(opts.max_escalations))
}

fn try_backward_pass(
    dynamics: &[(Matrix6<f64>, Matrix6x3)],
    costs: &[StageQuadratic],
    terminal: &(Vector6<f64>, Matrix6<f64>),
    lambda: f64,
) -> Option<Gains> {
    let n = costs.len();
    let mut vx = terminal.0;
    let mut vxx = terminal.1;
    let mut feedforward = vec![Vector3::zeros(); n];
    let mut feedback = vec![Matrix3x6::zeros(); n];
    let mut value_hessians = vec![Matrix6::zeros(); n + 1];
    value_hessians[n] = vxx;
    for i in (0..n).rev() {
        let (a, b) = &dynamics[i];
        let c = &costs[i];
        let qx = c.lx + a.transpose() * vx;
        let qu = c.lu + b.transpose() * vx;
        let qxx = c.lxx + a.transpose() * vxx * a;
        let quu = c.luu + b.transpose() * vxx * b;
        let qux = c.lux + b.transpose() * vxx * a;

        let quu_reg = quu + Matrix3::identity() * lambda;
        let chol = quu_reg.cholesky()?;
        let k = -chol.solve(&qu);
        let gain = -chol.solve(&qux);

        vx = qx + gain.transpose() * quu * k + gain.transpose() * qu + qux.transpose() * k;
        let vxx_raw = qxx + gain.transpose() * quu * gain + gain.transpose() * qux + qux.transpose() * gain;
        vxx = (vxx_raw + vxx_raw.transpose()) * 0.5;

        feedforward[i] = k;
        feedback[i] = gain;
        value_hessians[i] = vxx;
    }
    Some(Gains { feedforward, feedback, lambda, value_hessians })
}

/// Rolls out `u_i = ū_i + α·k_i + K_i·(x_i ⊖ x̄_i)` from `x0`.
pub fn forward_pass<P: ControlProblem>(
    problem: &P,
    x0: &P::State,
    nominal: &Rollout<P::State>,
    gains: &Gains,
    alpha: f64,
) -> Rollout<P::State> {
    let n = nominal.controls.len();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut x = x0.clone();
    let mut cost = 0.0;
    for i in 0..n {
        let mut u = nominal.controls[i] + gains.feedforward[i] * alpha;
        if let Ok(dx) = x.local_error(&nominal.states[i]) {
            u += gains.feedback[i] * dx;
        }
        cost += problem.stage_cost(i, &x, &u);
        let next = problem.step(i, &x, &u);
        states.push(std::mem::replace(&mut x, next));
        controls.push(u);
    }
    cost += problem.terminal_cost(&x);
    states.push(x);
    Rollout { states, controls, cost }
}

/// Per-solve diagnostics.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub zero_control_cost: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost of every accepted rollout, starting with the initial one.
    pub cost_history: Vec<f64>,
    /// `Quu` regularization used by each backward pass.
    pub lambda_history: Vec<f64>,
    /// Step size of each accepted forward pass.
    pub step_history: Vec<f64>,
    pub converged: bool,
    pub backward_failures: usize,
}

#[derive(Clone, Debug)]
pub struct Solution<S> {
    /// Feedback law whose noiseless rollout from `x0` is `trajectory`.
    pub policy: ControlPolicy<S>,
    pub trajectory: Rollout<S>,
    pub report: SolveReport,
}

/// iLQR from `x0`, starting from `warm_start` controls if given (padded or
/// truncated to the horizon) or from zero control.
///
/// The returned trajectory never costs more than the zero-control rollout.
pub fn solve<P: ControlProblem>(
    problem: &P,
    x0: &P::State,
    start: usize,
    warm_start: Option<&[Vector3<f64>]>,
    opts: &SolverOptions,
) -> Solution<P::State> {
    let n = problem.horizon();
    let zero = rollout(problem, x0, &vec![Vector3::zeros(); n]);
    let mut nominal = match warm_start {
        Some(w) => {
            let mut controls: Vec<Vector3<f64>> = w.iter().take(n).copied().collect();
            controls.resize(n, Vector3::zeros());
            let warm = rollout(problem, x0, &controls);
            if warm.cost <= zero.cost {
                warm
            } else {
                zero.clone()
            }
        }
        None => zero.clone(),
    };
    let mut report = SolveReport {
        zero_control_cost: zero.cost,
        initial_cost: nominal.cost,
        cost_history: vec![nominal.cost],
        ..SolveReport::default()
    };
    let mut policy = ControlPolicy::open_loop(start, nominal.states.clone(), nominal.controls.clone());

    for _ in 0..opts.max_iter {
        let dynamics: Vec<_> = (0..n).map(|i| problem.linearize(i, &nominal.states[i], &nominal.controls[i])).collect();
        let costs: Vec<_> = (0..n).map(|i| problem.quadratize(i, &nominal.states[i], &nominal.controls[i])).collect();
        let terminal = problem.terminal_quadratic(&nominal.states[n]);
        let gains = match backward_pass(&dynamics, &costs, &terminal, opts) {
            Ok(g) => g,
            Err(_) => {
                report.backward_failures += 1;
                break;
            }
        };
        report.iterations += 1;
        report.lambda_history.push(gains.lambda);

        let accepted = STEP_SIZES.iter().find_map(|&alpha| {
            let candidate = forward_pass(problem, x0, &nominal, &gains, alpha);
            (candidate.cost < nominal.cost).then_some((alpha, candidate))
        });
        let Some((alpha, candidate)) = accepted else {
            // No descent: the current nominal is the solution. Keep its
            // feedback gains.
            if report.step_history.is_empty() {
                policy.feedback = gains.feedback;
            }
            report.converged = true;
            break;
        };

        let improvement = (nominal.cost - candidate.cost) / nominal.cost.abs().max(f64::MIN_POSITIVE);
        policy = ControlPolicy {
            start,
            nominal_states: std::mem::take(&mut nominal.states),
            nominal_controls: std::mem::take(&mut nominal.controls),
            feedforward: gains.feedforward.iter().map(|k| k * alpha).collect(),
            feedback: gains.feedback,
        };
        nominal = candidate;
        report.cost_history.push(nominal.cost);
        report.step_history.push(alpha);
        if improvement < opts.tol {
            report.converged = true;
            break;
        }
    }
    report.final_cost = nominal.cost;
    Solution { policy, trajectory: nominal, report }
}
