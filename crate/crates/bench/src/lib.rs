//! Shared fixtures for the kernel benchmarks.

use pathint_core::model::{simulate_truth, InitialDistribution, ModelParams, Truth};

/// Default model and prior with one simulated truth of `steps` steps.
pub fn fixture(steps: usize, seed: u64) -> (ModelParams, InitialDistribution, Truth) {
    let p = ModelParams { steps, ..ModelParams::default() };
    let d0 = InitialDistribution::default();
    let truth = simulate_truth(&p, &d0, seed);
    (p, d0, truth)
}
