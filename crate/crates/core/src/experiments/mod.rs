//! Scenario files, topology and noise generation, metrics and the runner
//! behind the command-line tool.

mod config;
mod metrics;
mod runner;
mod topology;

use thiserror::Error;

pub use config::{EdgeSpec, Method, MethodSpec, ModelSpec, NetworkSpec, NoiseSpec, ScenarioConfig};
pub use metrics::{
    build_records, cumulative_regret, mean_std, read_csv, steady_window, tail_mean, write_csv, MetricsRecord,
    CSV_COLUMNS,
};
pub use runner::{
    apply_axis, evaluate_in_network, run_scenario, run_seed, scenario_graph, sweep, Evaluation, OracleSummary,
    Policy, RunOptions, ScenarioOutput, ScenarioSummary, SeedReport, SweepAxis, SweepPoint, SweepSummary,
};
pub use topology::{make_topology, sample_link_noise, topology_pairs, TopologyKind};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Messaging(#[from] crate::messaging::MessagingError),
    #[error(transparent)]
    Learner(#[from] crate::learner::LearnerError),
    #[error(transparent)]
    Dst(#[from] crate::dst::DstError),
}
