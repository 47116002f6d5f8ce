//! Node-level HPC performance monitoring.
//!
//! A per-node [`agent`] samples hardware and software counters at
//! clock-aligned intervals through the [`sampler`] backends and emits them as
//! key-value lines ([`logline`]). [`analytics`] turns stored samples into
//! derived metrics, roofline points, cross-node statistics and misuse
//! findings; [`report`] renders a per-job HTML document from those.

pub mod agent;
pub mod analytics;
pub mod logline;
pub mod model;
pub mod report;
pub mod sampler;
pub mod sim;

use thiserror::Error;

pub use logline::{decode_line, decode_logline, encode_canonical, encode_logline, LogLine};
pub use model::{
    JobContext, JobDetails, JobIndexEntry, MachineCatalog, MachineSpec, MetricSample,
    NodeStateKind, Source, Value,
};

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Encode(#[from] logline::EncodeError),
    #[error(transparent)]
    Decode(#[from] logline::DecodeError),
    #[error(transparent)]
    Sampler(#[from] sampler::SamplerError),
    #[error(transparent)]
    Analytics(#[from] analytics::AnalyticsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("yaml: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
