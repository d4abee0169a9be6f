// SPDX-License-Identifier: Apache-2.0

//! Workload generation, virtual-time execution of the full stack, metric
//! aggregation and reports.

pub mod calibrate;
pub mod cluster;
pub mod metrics;
pub mod report;
pub mod sim;
pub mod verify;
pub mod workload;

pub use metrics::{aggregate, Aggregate, RequestMetrics, RequestStatus, Stat};
pub use sim::{run, SimResult, Simulator, Topology};
pub use workload::{generate_workload, LengthDist, TraceRequest, WorkloadSpec};

use crate::engine::api::ApiError;
use crate::router::RouterError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("no completed requests to aggregate")]
    Empty,
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("scenario failed: {0}")]
    Scenario(String),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Engine(#[from] ApiError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
