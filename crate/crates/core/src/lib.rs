//! Particle filtering for a rigid body on SO(3), with proposals from
//! iLQR-computed feedback controls and path-integral importance weights.

pub mod error;
pub mod experiment;
pub mod filter;
pub mod ilqr;
pub mod lie;
pub mod model;
pub mod path_cost;
pub mod rng;
pub mod smoother;

pub use error::{Error, Result};
pub use experiment::{emit_results, run_experiment, ExperimentConfig, ExperimentSummary, TrialMetrics};
pub use filter::{run_filter, FilterConfig, FilterEstimate, FilterRun, FilterState};
pub use ilqr::{ControlPolicy, LocalCoords, SolverOptions};
pub use lie::{Rotation, UnitQuaternion};
pub use model::{BodyState, InitialDistribution, ModelParams, Observation, ObservationPath};
pub use path_cost::{TrajectoryRecord, WeightVector};
pub use smoother::{smooth, PolicySource, Proposal, SmoothingResult};
