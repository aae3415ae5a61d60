//! Stochastic rigid-body attitude dynamics, its one-step discretization and
//! the accelerometer/magnetometer/gyro observation model.
//!
//! Continuous model:
//!
//! ```text
//! dg  = g·hat(ξ) dt
//! dξ  = M⁻¹(Mξ × ξ + Hσu) dt + M⁻¹Hσ dW
//! dY  = h(g, ξ) dt + σ_B dB,      h = (−gᵀr_g, gᵀr_b, ξ) ∈ ℝ⁹
//! ```
//!
//! One step of length `dt` is a group exponential for `g` followed by an
//! Euler–Maruyama update of `ξ`; `g` is re-projected onto SO(3) after every
//! step.

use nalgebra::{Matrix3, Matrix6, SVector, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lie::{project_so3, Rotation, Tangent};
use crate::rng;

pub type Observation = SVector<f64, 9>;

/// Attitude and body angular velocity.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BodyState {
    pub g: Rotation,
    pub xi: Tangent,
}

impl BodyState {
    pub fn new(g: Rotation, xi: Tangent) -> Self {
        Self { g, xi }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Diagonal of the inertia tensor `M`.
    pub inertia: Vector3<f64>,
    /// Control-torque matrix `H`.
    pub control_matrix: Matrix3<f64>,
    /// Scales both the control and the process noise.
    pub sigma: f64,
    /// Observation noise intensity `σ_B`.
    pub sigma_obs: f64,
    /// Unit gravity direction seen by the accelerometer.
    pub gravity_dir: Vector3<f64>,
    /// Unit magnetic-field direction seen by the magnetometer.
    pub magnetic_dir: Vector3<f64>,
    pub dt: f64,
    pub steps: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        let s = 0.5f64.sqrt();
        Self {
            inertia: Vector3::new(1.0, 1.11, 1.3),
            control_matrix: Matrix3::identity(),
            sigma: 1.0,
            sigma_obs: 0.1,
            gravity_dir: Vector3::new(0.0, 0.0, 1.0),
            magnetic_dir: Vector3::new(s, 0.0, s),
            dt: 0.005,
            steps: 200,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !self.inertia.iter().all(|m| m.is_finite() && *m > 0.0) {
            return bad("inertia entries must be positive");
        }
        if !self.control_matrix.iter().all(|x| x.is_finite()) {
            return bad("control matrix must be finite");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be nonnegative");
        }
        if !(self.sigma_obs > 0.0 && self.sigma_obs.is_finite()) {
            return bad("sigma_obs must be positive");
        }
        for (name, r) in [("gravity_dir", &self.gravity_dir), ("magnetic_dir", &self.magnetic_dir)] {
            if (r.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!("{name} must be a unit vector")));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        Ok(())
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia)
    }

    /// `M⁻¹Hσ`, the map from control and noise to angular acceleration.
    pub fn input_gain(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia.map(|m| 1.0 / m)) * self.control_matrix * self.sigma
    }
}

/// `M⁻¹(Mξ × ξ + Hσu)`
pub fn drift(xi: &Tangent, u: &Vector3<f64>, p: &ModelParams) -> Vector3<f64> {
    let m_xi = p.inertia.component_mul(xi);
    let torque = m_xi.cross(xi) + p.control_matrix * u * p.sigma;
    torque.component_div(&p.inertia)
}

/// One discrete step under control `u` and standard normal draw `eps`.
pub fn step_state(s: &BodyState, u: &Vector3<f64>, eps: &Vector3<f64>, p: &ModelParams) -> BodyState {
    let g = project_so3((s.g * Rotation::exp(&(s.xi * p.dt))).matrix())
        .expect("product of two rotations projects onto SO(3)");
    let xi = s.xi + drift(&s.xi, u, p) * p.dt + p.input_gain() * eps * p.dt.sqrt();
    BodyState { g, xi }
}

/// `h(g, ξ) = (−gᵀr_g, gᵀr_b, ξ)`
pub fn observe(s: &BodyState, p: &ModelParams) -> Observation {
    let acc = -s.g.inverse_rotate(&p.gravity_dir);
    let mag = s.g.inverse_rotate(&p.magnetic_dir);
    let mut h = Observation::zeros();
    h.fixed_rows_mut::<3>(0).copy_from(&acc);
    h.fixed_rows_mut::<3>(3).copy_from(&mag);
    h.fixed_rows_mut::<3>(6).copy_from(&s.xi);
    h
}

/// Observation increments `ΔY_i = Y_{i+1} − Y_i`, one per step.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ObservationPath {
    pub increments: Vec<Observation>,
}

impl ObservationPath {
    pub fn new(increments: Vec<Observation>) -> Self {
        Self { increments }
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// Cumulative path `Y_0 = 0, Y_1, …, Y_N`.
    pub fn cumulative(&self) -> Vec<Observation> {
        let mut y = Observation::zeros();
        let mut out = Vec::with_capacity(self.len() + 1);
        out.push(y);
        for d in &self.increments {
            y += d;
            out.push(y);
        }
        out
    }
}

/// Gaussian in the 6-dim latent `(ξ, exp-coordinates of g)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialDistribution {
    covariance: Matrix6<f64>,
    factor: Matrix6<f64>,
}

impl Default for InitialDistribution {
    fn default() -> Self {
        Self::new(Matrix6::identity() * 0.01).expect("diagonal covariance is PSD")
    }
}

impl InitialDistribution {
    /// Accepts a symmetric positive-semidefinite covariance, including
    /// singular ones.
    pub fn new(covariance: Matrix6<f64>) -> Result<Self> {
        if !covariance.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidConfig("initial covariance must be finite".into()));
        }
        let scale = covariance.amax().max(1.0);
        if (covariance - covariance.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidConfig("initial covariance must be symmetric".into()));
        }
        let eig = covariance.symmetric_eigen();
        if eig.eigenvalues.min() < -1e-12 * scale {
            return Err(Error::InvalidConfig("initial covariance must be positive semidefinite".into()));
        }
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = eig.eigenvectors * Matrix6::from_diagonal(&sqrt);
        Ok(Self { covariance, factor })
    }

    pub fn covariance(&self) -> &Matrix6<f64> {
        &self.covariance
    }
}

pub fn standard_normal3<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.sample(StandardNormal))
}

/// Draws `x ~ N(0, Σ)`; `ξ₀ = x[0..3]`, `g₀ = exp(x[3..6])`.
pub fn sample_initial<R: Rng + ?Sized>(d0: &InitialDistribution, rng: &mut R) -> BodyState {
    let z = Vector6::from_fn(|_, _| rng.sample(StandardNormal));
    let x = d0.factor * z;
    BodyState { g: Rotation::exp(&x.fixed_rows::<3>(3).into_owned()), xi: x.fixed_rows::<3>(0).into_owned() }
}

/// Simulated ground truth: `states[0..=N]` and the `N` observation increments.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub states: Vec<BodyState>,
    pub observations: ObservationPath,
}

/// Uncontrolled trajectory from `ν₀` with `ΔY_i = h(x_i)dt + σ_B√dt·δ_i`.
pub fn simulate_truth(p: &ModelParams, d0: &InitialDistribution, seed: u64) -> Truth {
    let mut rng = rng::substream(seed, &[rng::TRUTH]);
    let mut s = sample_initial(d0, &mut rng);
    let mut states = Vec::with_capacity(p.steps + 1);
    let mut increments = Vec::with_capacity(p.steps);
    let sqrt_dt = p.dt.sqrt();
    let u = Vector3::zeros();
    states.push(s);
    for _ in 0..p.steps {
        let eps = standard_normal3(&mut rng);
        let delta = Observation::from_fn(|_, _| rng.sample(StandardNormal));
        increments.push(observe(&s, p) * p.dt + delta * (p.sigma_obs * sqrt_dt));
        s = step_state(&s, &u, &eps, p);
        states.push(s);
    }
    Truth { states, observations: ObservationPath::new(increments) }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    use super::*;
    use crate::lie::ROTATION_TOL;

    #[test]
    fn drift_examples() {
        let p = ModelParams::default();
        assert_eq!(drift(&Vector3::x(), &Vector3::zeros(), &p), Vector3::zeros());

        // (1, 1.11, 0) × (1, 1, 0) = (0, 0, 1 − 1.11)
        let d = drift(&Vector3::new(1.0, 1.0, 0.0), &Vector3::zeros(), &p);
        assert_relative_eq!(d, Vector3::new(0.0, 0.0, -0.11 / 1.3), epsilon = 1e-15);
        assert_relative_eq!(d.z, -0.084_615_384_615_384_6, epsilon = 1e-15);

        let d = drift(&Vector3::zeros(), &Vector3::new(1.0, 2.0, 3.0), &p);
        assert_relative_eq!(d, Vector3::new(1.0, 2.0 / 1.11, 3.0 / 1.3), epsilon = 1e-15);
    }

    #[test]
    fn step_fixed_point() {
        let p = ModelParams::default();
        let s = BodyState::default();
        let next = step_state(&s, &Vector3::zeros(), &Vector3::zeros(), &p);
        assert_relative_eq!(*next.g.matrix(), Matrix3::identity(), epsilon = 1e-15);
        assert_eq!(next.xi, Vector3::zeros());
    }

    #[test]
    fn step_pure_rotation() {
        let p = ModelParams::default();
        let s = BodyState::new(Rotation::identity(), Vector3::new(FRAC_PI_2 / p.dt, 0.0, 0.0));
        let next = step_state(&s, &Vector3::zeros(), &Vector3::zeros(), &p);
        let expected = Rotation::exp(&Vector3::new(FRAC_PI_2, 0.0, 0.0));
        assert_relative_eq!(*next.g.matrix(), *expected.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn step_with_noise() {
        let p = ModelParams::default();
        let s = BodyState::new(Rotation::identity(), Vector3::new(1.0, 1.0, 0.0));
        let next = step_state(&s, &Vector3::zeros(), &Vector3::x(), &p);
        let sq = 0.005f64.sqrt();
        // M⁻¹ scales the noise per axis; axis 0 has unit inertia.
        let expected = Vector3::new(1.0 + sq, 1.0, -0.11 / 1.3 * 0.005);
        assert_relative_eq!(next.xi, expected, epsilon = 1e-15);
    }

    #[test]
    fn observe_examples() {
        let p = ModelParams::default();
        let s = 0.5f64.sqrt();
        let h = observe(&BodyState::default(), &p);
        let expected = Observation::from_column_slice(&[0.0, 0.0, -1.0, s, 0.0, s, 0.0, 0.0, 0.0]);
        assert_relative_eq!(h, expected, epsilon = 1e-15);

        let g = Rotation::exp(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let h = observe(&BodyState::new(g, Vector3::zeros()), &p);
        // gᵀ for a quarter turn about z maps (a, b, c) to (b, −a, c).
        assert_relative_eq!(h.fixed_rows::<3>(3).into_owned(), Vector3::new(0.0, -s, s), epsilon = 1e-15);

        for v in [Vector3::new(0.3, -1.0, 2.0), Vector3::new(-2.0, 0.1, 0.4)] {
            let h = observe(&BodyState::new(Rotation::exp(&v), v), &p);
            assert_relative_eq!(h.fixed_rows::<3>(0).norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(h.fixed_rows::<3>(3).norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn noiseless_truth_is_frozen() {
        let p = ModelParams { sigma: 0.0, sigma_obs: 0.0, ..ModelParams::default() };
        let d0 = InitialDistribution::new(Matrix6::zeros()).unwrap();
        let truth = simulate_truth(&p, &d0, 3);
        assert_eq!(truth.states.len(), p.steps + 1);
        assert_eq!(truth.observations.len(), p.steps);
        let h0 = observe(&truth.states[0], &p) * p.dt;
        for (s, dy) in truth.states.iter().zip(&truth.observations.increments) {
            assert_relative_eq!(*s.g.matrix(), Matrix3::identity(), epsilon = 1e-15);
            assert_eq!(s.xi, Vector3::zeros());
            assert_relative_eq!(*dy, h0, epsilon = 1e-15);
        }
    }

    #[test]
    fn truth_is_deterministic() {
        let p = ModelParams::default();
        let d0 = InitialDistribution::default();
        assert_eq!(simulate_truth(&p, &d0, 11), simulate_truth(&p, &d0, 11));
        assert_ne!(simulate_truth(&p, &d0, 11), simulate_truth(&p, &d0, 12));
    }

    #[test]
    fn observation_noise_has_zero_mean() {
        let n = 100_000;
        let p = ModelParams { sigma: 0.0, steps: n, ..ModelParams::default() };
        let d0 = InitialDistribution::default();
        let truth = simulate_truth(&p, &d0, 5);
        let mut mean = Observation::zeros();
        for (s, dy) in truth.states.iter().zip(&truth.observations.increments) {
            mean += dy - observe(s, &p) * p.dt;
        }
        mean /= n as f64;
        let bound = 5.0 * p.sigma_obs * p.dt.sqrt() / (n as f64).sqrt();
        assert!(mean.amax() < bound, "{mean:?} vs {bound}");
    }

    #[test]
    fn orthogonality_after_full_horizon() {
        let p = ModelParams::default();
        let truth = simulate_truth(&p, &InitialDistribution::default(), 1);
        for s in &truth.states {
            assert!(s.g.orthogonality_defect() <= ROTATION_TOL);
            assert!((s.g.determinant() - 1.0).abs() <= ROTATION_TOL);
        }
    }

    #[test]
    fn kinetic_energy_drift_is_second_order() {
        let xi0 = Vector3::new(0.8, -1.3, 0.6);
        let energy_change = |dt: f64| {
            let p = ModelParams { sigma: 0.0, dt, ..ModelParams::default() };
            let s = BodyState::new(Rotation::identity(), xi0);
            let next = step_state(&s, &Vector3::zeros(), &Vector3::zeros(), &p);
            let e = |x: &Vector3<f64>| 0.5 * x.dot(&p.inertia.component_mul(x));
            e(&next.xi) - e(&s.xi)
        };
        // Mξ × ξ is orthogonal to ξ.
        let p = ModelParams::default();
        let m_xi = p.inertia.component_mul(&xi0);
        assert_relative_eq!(m_xi.cross(&xi0).dot(&xi0), 0.0, epsilon = 1e-15);

        let dt = 0.005;
        let c1 = energy_change(dt) / (dt * dt);
        let c2 = energy_change(dt / 2.0) / (dt * dt / 4.0);
        assert!(c1 >= 0.0);
        assert_relative_eq!(c1, c2, max_relative = 1e-6);
    }

    #[test]
    fn degenerate_initial_distribution() {
        let d0 = InitialDistribution::new(Matrix6::zeros()).unwrap();
        let mut rng = rng::substream(1, &[]);
        let s = sample_initial(&d0, &mut rng);
        assert_eq!(s.xi, Vector3::zeros());
        assert_eq!(*s.g.matrix(), Matrix3::identity());
    }

    #[test]
    fn initial_velocity_covariance() {
        let d0 = InitialDistribution::new(Matrix6::identity()).unwrap();
        let mut rng = rng::substream(2, &[]);
        let n = 100_000;
        let mut cov = Matrix3::zeros();
        let mut mean = Vector3::zeros();
        let draws: Vec<BodyState> = (0..n).map(|_| sample_initial(&d0, &mut rng)).collect();
        for s in &draws {
            mean += s.xi;
            assert!(s.g.orthogonality_defect() <= ROTATION_TOL);
            assert!((s.g.determinant() - 1.0).abs() <= ROTATION_TOL);
        }
        mean /= n as f64;
        for s in &draws {
            let d = s.xi - mean;
            cov += d * d.transpose();
        }
        cov /= (n - 1) as f64;
        assert!((cov - Matrix3::identity()).amax() < 0.03, "{cov}");
    }

    #[test]
    fn invalid_covariance_rejected() {
        assert!(InitialDistribution::new(-Matrix6::identity()).is_err());
        let mut m = Matrix6::identity();
        m[(0, 1)] = 0.5;
        assert!(InitialDistribution::new(m).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::default().validate().is_ok());
        assert!(ModelParams { sigma_obs: 0.0, ..ModelParams::default() }.validate().is_err());
        assert!(ModelParams { steps: 0, ..ModelParams::default() }.validate().is_err());
        assert!(ModelParams { inertia: Vector3::new(1.0, -1.0, 1.0), ..ModelParams::default() }.validate().is_err());
        assert!(ModelParams { gravity_dir: Vector3::new(0.0, 0.0, 2.0), ..ModelParams::default() }.validate().is_err());
    }
}
