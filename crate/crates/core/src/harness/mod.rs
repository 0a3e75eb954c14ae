//! Experiment orchestration: configuration, the round loop, diagnostics,
//! metrics files and the forced bad-round scenario.

pub mod config;
pub mod diagnostics;
pub mod metrics;
mod runner;
pub mod scenario;

pub use config::{Algorithm, DatasetConfig, RunConfig};
pub use runner::{
    prepare, run_experiment, run_prepared, run_seed, summarize, ExperimentResult, Prepared, SeedRun, SeedSummary, Summary,
};

use serde::{Deserialize, Serialize};

/// Per-group adaptation values for one round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub name: String,
    /// `None` when the group's aggregate gradient cancelled out.
    pub gsi: Option<f64>,
    /// Multiplier actually applied to the group's server step.
    pub multiplier: f64,
    /// GSI over its running baseline, before clipping; `None` without FedGLAD.
    pub raw_ratio: Option<f64>,
}

/// Metrics of one completed round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean over participants of their mean local minibatch loss.
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
    /// GSI with all parameters treated as one group.
    pub gsi_all: Option<f64>,
    pub sim_score: Option<f64>,
    pub scale_ratio: Option<f64>,
    pub oracle_eta: Option<f64>,
    pub groups: Vec<GroupRecord>,
    pub sampled: Vec<usize>,
    /// Not written to the metrics CSV, which must be reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_ms: f64,
}
