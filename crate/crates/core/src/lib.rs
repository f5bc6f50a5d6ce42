//! Multi-client, multi-server tail-latency benchmarking harness.
//!
//! Persistent servers accept clients at any time; clients own their request
//! budgets and follow time-varying open-loop QPS schedules; an optional
//! connection-level balancer spreads clients over servers; and the stats
//! module turns client logs into windowed tail-latency summaries,
//! confidence intervals and Welch t-tests.

pub mod balancer;
pub mod client;
pub mod clock;
pub mod orchestrator;
pub mod proto;
pub mod schedule;
pub mod server;
pub mod stats;
pub mod workload;
