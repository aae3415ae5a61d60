//! Repeated-trial experiments: configuration, metrics and result files.
//!
//! Each trial draws a fresh truth trajectory and observation path from a
//! seed derived from the experiment seed and the trial number, runs the
//! filter, and scores its estimates against the truth. Every algorithm and
//! window length sees the same truth for a given trial.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{run_filter, FilterConfig, FilterRun};
use crate::ilqr::SolverOptions;
use crate::lie::{rotation_angle_error, to_quaternion};
use crate::model::{simulate_truth, InitialDistribution, ModelParams, Truth};
use crate::rng;
use crate::smoother::Proposal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub inertia: [f64; 3],
    /// Row-major.
    pub control_matrix: [[f64; 3]; 3],
    pub sigma: f64,
    pub sigma_obs: f64,
    pub gravity_dir: [f64; 3],
    pub magnetic_dir: [f64; 3],
    pub dt: f64,
    pub steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::from(&ModelParams::default())
    }
}

impl From<&ModelParams> for ModelConfig {
    fn from(p: &ModelParams) -> Self {
        let m = &p.control_matrix;
        Self {
            inertia: p.inertia.into(),
            control_matrix: [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]]),
            sigma: p.sigma,
            sigma_obs: p.sigma_obs,
            gravity_dir: p.gravity_dir.into(),
            magnetic_dir: p.magnetic_dir.into(),
            dt: p.dt,
            steps: p.steps,
        }
    }
}

impl ModelConfig {
    pub fn params(&self) -> Result<ModelParams> {
        let c = &self.control_matrix;
        let p = ModelParams {
            inertia: Vector3::from(self.inertia),
            control_matrix: Matrix3::from_fn(|r, col| c[r][col]),
            sigma: self.sigma,
            sigma_obs: self.sigma_obs,
            gravity_dir: Vector3::from(self.gravity_dir),
            magnetic_dir: Vector3::from(self.magnetic_dir),
            dt: self.dt,
            steps: self.steps,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Diagonal covariance of the initial distribution, velocity entries first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    pub covariance_diagonal: [f64; 6],
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self { covariance_diagonal: [0.01; 6] }
    }
}

impl InitialConfig {
    pub fn distribution(&self) -> Result<InitialDistribution> {
        InitialDistribution::new(Matrix6::from_diagonal(&Vector6::from(self.covariance_diagonal)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub particles: usize,
    pub windows: Vec<usize>,
    pub algorithms: Vec<Proposal>,
    pub gamma_bar: f64,
    pub resampling: bool,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            particles: 100,
            windows: vec![20],
            algorithms: vec![Proposal::Zero, Proposal::Ilqr],
            gamma_bar: 0.1,
            resampling: false,
        }
    }
}

/// Everything an experiment depends on. Missing keys take the documented
/// defaults; the summary echoes the effective values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub model: ModelConfig,
    pub initial: InitialConfig,
    pub filter: FilterSection,
    pub solver: SolverOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20,
            model: ModelConfig::default(),
            initial: InitialConfig::default(),
            filter: FilterSection::default(),
            solver: SolverOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.model.params()?;
        self.initial.distribution()?;
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.filter.windows.is_empty() || self.filter.algorithms.is_empty() {
            return Err(Error::InvalidConfig("at least one window and one algorithm are required".into()));
        }
        for &h in &self.filter.windows {
            if h > p.steps {
                return Err(Error::InvalidConfig(format!("window {h} exceeds the {} simulated steps", p.steps)));
            }
            self.filter_config(h, Proposal::Zero).validate()?;
        }
        if self.solver.max_iter == 0 || self.solver.tol.is_nan() || self.solver.tol < 0.0 {
            return Err(Error::InvalidConfig("solver needs max_iter ≥ 1 and tol ≥ 0".into()));
        }
        Ok(())
    }

    pub fn filter_config(&self, window: usize, proposal: Proposal) -> FilterConfig {
        FilterConfig {
            window,
            particles: self.filter.particles,
            gamma_bar: self.filter.gamma_bar,
            resampling: self.filter.resampling,
            proposal,
            solver: self.solver.clone(),
        }
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        rng::derive_seed(self.seed, &[rng::TRIAL, trial as u64])
    }
}

/// One row of a trial CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub time: f64,
    pub gamma: f64,
    pub angle_error_deg: f64,
    pub xi_sq_error: f64,
    pub resampled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial: usize,
    pub seed: u64,
    /// Time average of `‖ξ̂ − ξ‖²` over indices `1..=N`.
    pub xi_mse: f64,
    /// Time average of the rotation angle error in degrees over `1..=N`.
    pub angle_error_deg: f64,
    /// Time average of the effective ratio over `1..=N`.
    pub mean_effective_ratio: f64,
    pub resampling_events: usize,
    #[serde(skip)]
    pub rows: Vec<StepRow>,
}

/// Scores a filter run against the truth it was run on.
pub fn score(run: &FilterRun, truth: &Truth, trial: usize, seed: u64) -> TrialMetrics {
    let rows: Vec<StepRow> = run
        .estimates
        .iter()
        .map(|e| {
            let s = &truth.states[e.index];
            StepRow {
                time: e.time,
                gamma: e.effective_ratio,
                angle_error_deg: rotation_angle_error(&e.quaternion, &to_quaternion(&s.g)),
                xi_sq_error: (e.xi - s.xi).norm_squared(),
                resampled: e.resampled,
            }
        })
        .collect();
    let scored = &rows[1.min(rows.len())..];
    let n = scored.len().max(1) as f64;
    TrialMetrics {
        trial,
        seed,
        xi_mse: scored.iter().map(|r| r.xi_sq_error).sum::<f64>() / n,
        angle_error_deg: scored.iter().map(|r| r.angle_error_deg).sum::<f64>() / n,
        mean_effective_ratio: scored.iter().map(|r| r.gamma).sum::<f64>() / n,
        resampling_events: run.resampling_events,
        rows,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Standard error of the mean; zero for a single trial.
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Self { mean, se }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub xi_mse: MeanSe,
    pub angle_error_deg: MeanSe,
    pub mean_effective_ratio: MeanSe,
    pub resampling_events: MeanSe,
}

impl Aggregate {
    pub fn of(trials: &[TrialMetrics]) -> Self {
        let col = |f: fn(&TrialMetrics) -> f64| MeanSe::of(&trials.iter().map(f).collect::<Vec<_>>());
        Self {
            xi_mse: col(|t| t.xi_mse),
            angle_error_deg: col(|t| t.angle_error_deg),
            mean_effective_ratio: col(|t| t.mean_effective_ratio),
            resampling_events: col(|t| t.resampling_events as f64),
        }
    }
}

/// All trials of one algorithm at one window length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Proposal,
    pub window: usize,
    pub resampling: bool,
    pub aggregate: Aggregate,
    pub trials: Vec<TrialMetrics>,
}

impl RunSummary {
    pub fn label(&self) -> String {
        format!("{}_H{}", self.algorithm, self.window)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub runs: Vec<RunSummary>,
}

/// Runs every configured algorithm at every window length.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let p = cfg.model.params()?;
    let d0 = cfg.initial.distribution()?;
    let truths: Vec<(u64, Truth)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let seed = cfg.trial_seed(t);
            (seed, simulate_truth(&p, &d0, seed))
        })
        .collect();
    let mut runs = Vec::new();
    for &algorithm in &cfg.filter.algorithms {
        for &window in &cfg.filter.windows {
            let fc = cfg.filter_config(window, algorithm);
            let trials = truths
                .par_iter()
                .enumerate()
                .map(|(t, (seed, truth))| {
                    let run = run_filter(&truth.observations, &p, &d0, &fc, *seed)?;
                    Ok(score(&run, truth, t, *seed))
                })
                .collect::<Result<Vec<_>>>()?;
            runs.push(RunSummary {
                algorithm,
                window,
                resampling: cfg.filter.resampling,
                aggregate: Aggregate::of(&trials),
                trials,
            });
        }
    }
    Ok(ExperimentSummary { seed: cfg.seed, config: cfg.clone(), runs })
}

pub const SUMMARY_FILE: &str = "summary.json";

pub fn trial_csv_name(run: &RunSummary, trial: usize) -> String {
    format!("{}_trial{trial:03}.csv", run.label())
}

/// Writes one row-per-step CSV.
pub fn write_rows(path: &Path, rows: &[StepRow]) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(["time", "gamma", "angle_error_deg", "xi_sq_error", "resampled"]).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Writes one CSV per trial and run plus `summary.json` into `dir`,
/// returning the paths written.
pub fn emit_results(summary: &ExperimentSummary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    for run in &summary.runs {
        for t in &run.trials {
            let path = dir.join(trial_csv_name(run, t.trial));
            write_rows(&path, &t.rows)?;
            written.push(path);
        }
    }
    let path = dir.join(SUMMARY_FILE);
    write_json(&path, summary)?;
    written.push(path);
    Ok(written)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text + "\n").map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            seed: 11,
            trials: 3,
            model: ModelConfig { steps: 15, ..ModelConfig::default() },
            filter: FilterSection { particles: 20, windows: vec![1, 4], ..FilterSection::default() },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn parses_partial_toml_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 5\n[filter]\nparticles = 50\nwindows = [5, 10]\nalgorithms = [\"ilqr\"]\ngamma_bar = 0.2\nresampling = true\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.trials, 20);
        assert_eq!(cfg.filter.windows, vec![5, 10]);
        assert_eq!(cfg.filter.algorithms, vec![Proposal::Ilqr]);
        assert_eq!(cfg.model.params().unwrap(), ModelParams::default());
        let round = ExperimentConfig::from_toml_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "trials = 0",
            "bogus = 1",
            "[filter]\nparticles = 1\nwindows = [2]\nalgorithms = [\"zero\"]\ngamma_bar = 0.1\nresampling = false",
            "[filter]\nparticles = 10\nwindows = [500]\nalgorithms = [\"zero\"]\ngamma_bar = 0.1\nresampling = false",
            "[initial]\ncovariance_diagonal = [0.1, 0.1, 0.1, 0.1, 0.1, -1.0]",
            "seed = \"x\"",
        ] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn aggregates_are_trial_means_and_runs_are_deterministic() {
        let cfg = small();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.runs.len(), 4);
        for run in &a.runs {
            let mean = run.trials.iter().map(|t| t.xi_mse).sum::<f64>() / 3.0;
            assert_relative_eq!(run.aggregate.xi_mse.mean, mean, epsilon = 1e-12);
            for t in &run.trials {
                assert_eq!(t.rows.len(), 16);
                assert!(t.xi_mse >= 0.0);
                assert!(t.rows.iter().all(|r| (0.0..=180.0).contains(&r.angle_error_deg)));
            }
        }
    }

    #[test]
    fn noiseless_instance_is_tracked_exactly() {
        let cfg = ExperimentConfig {
            trials: 2,
            model: ModelConfig { sigma: 0.0, sigma_obs: 1e-6, steps: 20, ..ModelConfig::default() },
            initial: InitialConfig { covariance_diagonal: [0.0; 6] },
            filter: FilterSection { particles: 10, windows: vec![5], ..FilterSection::default() },
            ..ExperimentConfig::default()
        };
        for run in run_experiment(&cfg).unwrap().runs {
            assert!(run.aggregate.xi_mse.mean < 1e-3);
            assert!(run.aggregate.angle_error_deg.mean < 1e-3);
        }
    }

    #[test]
    fn emitted_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(&ExperimentConfig { trials: 2, ..small() }).unwrap();
        let written = emit_results(&summary, dir.path()).unwrap();
        assert_eq!(written.len(), 4 * 2 + 1);
        let text = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        let back: ExperimentSummary = serde_json::from_str(&text).unwrap();
        for (x, y) in back.runs.iter().zip(&summary.runs) {
            assert_eq!(x.aggregate, y.aggregate);
        }
        assert_eq!(back.config, summary.config);

        let mut rdr = csv::Reader::from_path(&written[0]).unwrap();
        let rows: Vec<StepRow> = rdr.deserialize().collect::<std::result::Result<_, _>>().unwrap();
        assert_eq!(rows, summary.runs[0].trials[0].rows);
    }

    #[test]
    fn empty_rows_give_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_rows(&path, &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "time,gamma,angle_error_deg,xi_sq_error,resampled\n");
    }

    #[test]
    fn io_errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = write_rows(&blocker.join("sub.csv"), &[]).unwrap_err();
        assert!(err.to_string().contains("sub.csv"), "{err}");
    }
}
