//! Scenario files, scenario runs, QPS sweeps and sweep comparison.

mod run;
mod scenario;
mod sweep;

use thiserror::Error;

pub use run::{
    format_final_stats, run_scenario, ChildServer, ClientOutcome, RunOptions, ScenarioReport,
    WARMUP_S,
};
pub use scenario::{
    parse_scenario, parse_scenario_str, LaunchMode, ParseError, ScenarioBalancer, ScenarioClient,
    ScenarioServer, ScenarioSpec, Target, DEFAULT_REPETITIONS,
};
pub use sweep::{
    compare_runs, parse_sweep, parse_sweep_str, run_sweep, Comparison, SweepCell, SweepPoint,
    SweepReport, SweepSpec, SweepTable, CELLS_HEADER, CI_LEVEL, SWEEP_HEADER,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Server(#[from] crate::server::ServerError),
    #[error(transparent)]
    Balancer(#[from] crate::balancer::BalancerError),
    #[error("launch failed: {0}")]
    Launch(String),
    #[error("report: {0}")]
    Report(String),
    #[error(
        "sweep grids differ: missing in first {missing_in_a:?}, missing in second {missing_in_b:?}"
    )]
    GridMismatch {
        missing_in_a: Vec<f64>,
        missing_in_b: Vec<f64>,
    },
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
