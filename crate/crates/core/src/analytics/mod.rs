//! Derived metrics, job statistics, roofline data and misuse detectors.
//!
//! Everything here is a pure function over a job's stored samples.

pub mod derive;
pub mod detect;
pub mod jobs;
pub mod summary;
pub mod timeline;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use derive::{
    attainable_performance, counter_delta, derive_bandwidth, derive_flops, derive_intensity,
    derive_ipc, CounterId, CounterReading, DeltaTracker, COUNTER_WIDTH,
};
pub use detect::{run_detectors, Detector, DetectorFinding, Severity};
pub use jobs::JobAccumulator;
pub use summary::{
    band, job_summary, median, roofline_point, BandPoint, JobSummary, MetricStats, RooflinePoint,
};
pub use timeline::{job_timeline, DerivedMetrics, Gap, JobTimeline, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("job {0} not found")]
    NotFound(String),
    #[error("unknown floating-point event {event}; known events: {known}")]
    UnknownEvent { event: String, known: String },
    #[error("counter identity mismatch: {prev} vs {curr}")]
    CounterMismatch { prev: String, curr: String },
    #[error("samples out of order: {prev_ts} is not before {curr_ts}")]
    OutOfOrder { prev_ts: i64, curr_ts: i64 },
    #[error("interval must be positive, got {0}")]
    BadInterval(f64),
    #[error("invalid detector parameters: {0}")]
    Params(String),
}

fn default_gflops_floor() -> f64 {
    0.01
}
fn default_ipc_floor() -> f64 {
    0.05
}
fn default_consecutive() -> usize {
    3
}
fn default_gpu_util_floor() -> f64 {
    1.0
}
fn default_gpu_mem_floor() -> f64 {
    256.0
}
fn default_mem_fraction() -> f64 {
    0.25
}
fn default_core_fraction() -> f64 {
    0.5
}

/// Detector thresholds. Every field has a default, so an empty file is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    /// hanging: GFLOP/s per socket below this counts as idle.
    #[serde(default = "default_gflops_floor")]
    pub gflops_floor: f64,
    /// hanging: IPC below this counts as idle.
    #[serde(default = "default_ipc_floor")]
    pub ipc_floor: f64,
    /// hanging: idle intervals in a row needed for a finding.
    #[serde(default = "default_consecutive")]
    pub consecutive: usize,
    /// gpu_unused: utilization percent.
    #[serde(default = "default_gpu_util_floor")]
    pub gpu_util_floor: f64,
    #[serde(default = "default_gpu_mem_floor")]
    pub gpu_mem_floor_mib: f64,
    /// mem_unused: fraction of standard-node RAM.
    #[serde(default = "default_mem_fraction")]
    pub mem_fraction: f64,
    /// low_cores: fraction of the node's cores.
    #[serde(default = "default_core_fraction")]
    pub core_fraction: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            gflops_floor: default_gflops_floor(),
            ipc_floor: default_ipc_floor(),
            consecutive: default_consecutive(),
            gpu_util_floor: default_gpu_util_floor(),
            gpu_mem_floor_mib: default_gpu_mem_floor(),
            mem_fraction: default_mem_fraction(),
            core_fraction: default_core_fraction(),
        }
    }
}

impl DetectorParams {
    pub fn from_yaml(text: &str) -> Result<Self, crate::Error> {
        let params: DetectorParams = if text.trim().is_empty() {
            DetectorParams::default()
        } else {
            serde_yaml::from_str(text)?
        };
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        let finite_nonneg = [
            ("gflops_floor", self.gflops_floor),
            ("ipc_floor", self.ipc_floor),
            ("gpu_util_floor", self.gpu_util_floor),
            ("gpu_mem_floor_mib", self.gpu_mem_floor_mib),
        ];
        for (name, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AnalyticsError::Params(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        for (name, v) in [
            ("mem_fraction", self.mem_fraction),
            ("core_fraction", self.core_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(AnalyticsError::Params(format!("{name} must be in (0, 1]")));
            }
        }
        if self.consecutive == 0 {
            return Err(AnalyticsError::Params(
                "consecutive must be at least 1".into(),
            ));
        }
        Ok(())
    }
}
