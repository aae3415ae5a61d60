//! `pathint`: simulate, smooth, filter and benchmark from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pathint_core::experiment::{self, score, ExperimentConfig};
use pathint_core::lie::{rotation_angle_error, to_quaternion};
use pathint_core::model::{simulate_truth, BodyState, Truth};
use pathint_core::smoother::{self, InitialParticles, PolicySource, Proposal};
use pathint_core::{emit_results, run_experiment, run_filter};

#[derive(Parser)]
#[command(name = "pathint", version, about = "Control-guided particle filtering for rigid-body attitude")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one truth trajectory and its observations.
    Simulate(Common),
    /// Smooth over the window [0, H) of one simulated trajectory.
    Smooth(Common),
    /// Filter one simulated trajectory.
    Filter(Common),
    /// Run every configured algorithm and window over repeated trials.
    Bench(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_proposal)]
    algorithm: Option<Proposal>,
    /// Window length H.
    #[arg(long)]
    window: Option<usize>,
    /// Number of particles K.
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long, value_enum)]
    resampling: Option<Switch>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_proposal(s: &str) -> std::result::Result<Proposal, String> {
    s.parse().map_err(|e: pathint_core::Error| e.to_string())
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(a) = self.algorithm {
            cfg.filter.algorithms = vec![a];
        }
        if let Some(h) = self.window {
            cfg.filter.windows = vec![h];
        }
        if let Some(k) = self.particles {
            cfg.filter.particles = k;
        }
        if let Some(r) = self.resampling {
            cfg.filter.resampling = matches!(r, Switch::On);
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

/// Single-run commands use the first configured algorithm and window.
fn single_run(cfg: &ExperimentConfig) -> (Proposal, usize) {
    (cfg.filter.algorithms[0], cfg.filter.windows[0])
}

fn state_record(index: usize, time: f64, s: &BodyState) -> [String; 9] {
    let q = to_quaternion(&s.g);
    [index as f64, time, q.w, q.x, q.y, q.z, s.xi.x, s.xi.y, s.xi.z].map(|x| x.to_string())
}

const STATE_HEADER: [&str; 9] = ["index", "time", "qw", "qx", "qy", "qz", "xi_x", "xi_y", "xi_z"];

fn simulate(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let dir = c.out_dir()?;
    let p = cfg.model.params()?;
    let seed = cfg.trial_seed(0);
    let truth = simulate_truth(&p, &cfg.initial.distribution()?, seed);

    let path = dir.join("truth.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| path.display().to_string())?;
    w.write_record(STATE_HEADER)?;
    for (i, s) in truth.states.iter().enumerate() {
        w.write_record(state_record(i, i as f64 * p.dt, s))?;
    }
    w.flush()?;

    let path = dir.join("observations.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| path.display().to_string())?;
    let header: Vec<String> = ["index".to_string()].into_iter().chain((0..9).map(|d| format!("dy{d}"))).collect();
    w.write_record(&header)?;
    for (i, dy) in truth.observations.increments.iter().enumerate() {
        w.write_record(std::iter::once(i.to_string()).chain(dy.iter().map(|x| x.to_string())))?;
    }
    w.flush()?;

    experiment::write_json(&dir.join("summary.json"), &json!({ "seed": seed, "config": cfg }))?;
    println!("simulated {} steps into {}", p.steps, dir.display());
    Ok(())
}

fn truth_for(cfg: &ExperimentConfig) -> Result<(u64, Truth)> {
    let seed = cfg.trial_seed(0);
    Ok((seed, simulate_truth(&cfg.model.params()?, &cfg.initial.distribution()?, seed)))
}

fn smooth(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let dir = c.out_dir()?;
    let p = cfg.model.params()?;
    let d0 = cfg.initial.distribution()?;
    let (algorithm, window) = single_run(&cfg);
    let (seed, truth) = truth_for(&cfg)?;
    let source = match algorithm {
        Proposal::Zero => PolicySource::Zero,
        Proposal::Ilqr => PolicySource::Ilqr { options: &cfg.solver, warm_start: None },
    };
    let r = smoother::smooth(
        &truth.observations,
        0..window,
        InitialParticles::Prior(&d0),
        source,
        cfg.filter.particles,
        &p,
        seed,
    )?;

    let path = dir.join("smoothing.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| path.display().to_string())?;
    w.write_record(["particle", "weight", "cost", "qw", "qx", "qy", "qz", "xi_x", "xi_y", "xi_z"])?;
    for (k, tr) in r.particles.iter().enumerate() {
        let s = tr.last();
        let q = to_quaternion(&s.g);
        let row = [r.weights.as_slice()[k], r.costs[k], q.w, q.x, q.y, q.z, s.xi.x, s.xi.y, s.xi.z];
        w.write_record(std::iter::once(k.to_string()).chain(row.iter().map(|x| x.to_string())))?;
    }
    w.flush()?;

    let tails: Vec<BodyState> = r.particles.iter().map(|tr| *tr.last()).collect();
    let (q, xi) = smoother::weighted_mean_state(&tails, r.weights.as_slice())?;
    let actual = &truth.states[window];
    let summary = json!({
        "seed": seed,
        "config": cfg,
        "algorithm": algorithm,
        "window": window,
        "effective_ratio": r.effective_ratio,
        "angle_error_deg": rotation_angle_error(&q, &to_quaternion(&actual.g)),
        "xi_sq_error": (xi - actual.xi).norm_squared(),
        "solver": r.solver,
    });
    experiment::write_json(&dir.join("summary.json"), &summary)?;
    println!("{algorithm} smoothing over [0, {window}): effective ratio {:.4}", r.effective_ratio);
    Ok(())
}

fn filter(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let dir = c.out_dir()?;
    let p = cfg.model.params()?;
    let d0 = cfg.initial.distribution()?;
    let (algorithm, window) = single_run(&cfg);
    let (seed, truth) = truth_for(&cfg)?;
    let run = run_filter(&truth.observations, &p, &d0, &cfg.filter_config(window, algorithm), seed)?;
    let metrics = score(&run, &truth, 0, seed);
    experiment::write_rows(&dir.join("filter.csv"), &metrics.rows)?;
    experiment::write_json(
        &dir.join("summary.json"),
        &json!({ "seed": seed, "config": cfg, "algorithm": algorithm, "window": window, "metrics": metrics }),
    )?;
    println!(
        "{algorithm} H={window}: ξ-MSE {:.4}, angle error {:.3}°, mean γ {:.4}, {} resampling events over {} steps",
        metrics.xi_mse,
        metrics.angle_error_deg,
        metrics.mean_effective_ratio,
        metrics.resampling_events,
        metrics.rows.len() - 1
    );
    Ok(())
}

fn bench(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let dir = c.out_dir()?;
    let summary = run_experiment(&cfg)?;
    let written = emit_results(&summary, dir)?;
    for run in &summary.runs {
        let a = &run.aggregate;
        println!(
            "{:<9} ξ-MSE {:.4} ± {:.4}   angle {:.3}° ± {:.3}   γ {:.4}   resampling {:.1}",
            run.label(),
            a.xi_mse.mean,
            a.xi_mse.se,
            a.angle_error_deg.mean,
            a.angle_error_deg.se,
            a.mean_effective_ratio.mean,
            a.resampling_events.mean
        );
    }
    println!("wrote {} files to {}", written.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Smooth(c) => smooth(c),
        Command::Filter(c) => filter(c),
        Command::Bench(c) => bench(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{line}");
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
