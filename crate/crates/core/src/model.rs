//! Domain types shared by every component of the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved header keys of the wire format. Counter names may not use them.
pub const RESERVED_KEYS: &[&str] = &["v", "ts", "cluster", "node", "src", "skt", "job", "part"];

/// Prefix of the payload keys carrying job allocation facts.
pub const JOB_KEY_PREFIX: &str = "job.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid counter name {0:?}")]
    CounterName(String),
    #[error("invalid token {field}={value:?}")]
    Token { field: &'static str, value: String },
    #[error("negative timestamp {0}")]
    Timestamp(i64),
    #[error("counter {0} has a non-finite value")]
    NonFinite(String),
    #[error("counter {0} has an empty string value")]
    EmptyText(String),
    #[error("job {job} started at {start} after sample timestamp {ts}")]
    JobStart { job: String, start: i64, ts: i64 },
    #[error("unknown source {0:?}")]
    UnknownSource(String),
    #[error("unknown node state {0:?}")]
    UnknownNodeState(String),
    #[error("invalid machine spec {node_type}: {reason}")]
    MachineSpec { node_type: String, reason: String },
}

/// Data-source category a sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    CpuCore,
    CpuUncore,
    Gpu,
    Io,
    Network,
    Software,
}

impl Source {
    pub const ALL: [Source; 6] = [
        Source::CpuCore,
        Source::CpuUncore,
        Source::Gpu,
        Source::Io,
        Source::Network,
        Source::Software,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::CpuCore => "cpu_core",
            Source::CpuUncore => "cpu_uncore",
            Source::Gpu => "gpu",
            Source::Io => "io",
            Source::Network => "network",
            Source::Software => "software",
        }
    }

    /// Sources sampled once per socket rather than once per node.
    pub fn per_socket(self) -> bool {
        matches!(self, Source::CpuCore | Source::CpuUncore)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Source::ALL
            .iter()
            .copied()
            .find(|src| src.as_str() == s)
            .ok_or_else(|| ModelError::UnknownSource(s.to_string()))
    }
}

/// One counter reading: a 64-bit integer counter, a decimal gauge, or a short
/// string fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(u64),
    Float(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(v) => Some(*v as f64),
            Value::Float(v) => Some(*v),
            Value::Text(_) => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

/// Batch-system view of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStateKind {
    Exclusive,
    Shared,
    Idle,
}

impl NodeStateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeStateKind::Exclusive => "exclusive",
            NodeStateKind::Shared => "shared",
            NodeStateKind::Idle => "idle",
        }
    }
}

impl FromStr for NodeStateKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exclusive" => Ok(NodeStateKind::Exclusive),
            "shared" => Ok(NodeStateKind::Shared),
            "idle" => Ok(NodeStateKind::Idle),
            other => Err(ModelError::UnknownNodeState(other.to_string())),
        }
    }
}

/// Allocation facts of a batch job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobDetails {
    pub user_id: String,
    pub partition: String,
    pub num_nodes: u32,
    pub cores_allocated: u32,
    pub gpus_allocated: u32,
    pub node_state: NodeStateKind,
    pub job_start: i64,
}

/// Job identity attached to a sample. Lines always carry the id; the
/// allocation facts travel along when the emitter knows them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobContext {
    pub job_id: String,
    pub details: Option<JobDetails>,
}

impl JobContext {
    pub fn id_only(job_id: impl Into<String>) -> Self {
        JobContext {
            job_id: job_id.into(),
            details: None,
        }
    }

    pub fn with_details(job_id: impl Into<String>, details: JobDetails) -> Self {
        JobContext {
            job_id: job_id.into(),
            details: Some(details),
        }
    }
}

/// One timestamped bundle of counter readings from one source on one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub timestamp: i64,
    pub cluster: String,
    pub node: String,
    pub source: Source,
    pub socket: Option<u32>,
    pub values: BTreeMap<String, Value>,
    pub job: Option<JobContext>,
}

/// Identity of a sample for deduplication: (node, ts, source, socket).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleKey {
    pub node: String,
    pub timestamp: i64,
    pub source: Source,
    pub socket: Option<u32>,
}

impl MetricSample {
    pub fn new(timestamp: i64, cluster: &str, node: &str, source: Source) -> Self {
        MetricSample {
            timestamp,
            cluster: cluster.to_string(),
            node: node.to_string(),
            source,
            socket: None,
            values: BTreeMap::new(),
            job: None,
        }
    }

    pub fn key(&self) -> SampleKey {
        SampleKey {
            node: self.node.clone(),
            timestamp: self.timestamp,
            source: self.source,
            socket: self.socket,
        }
    }

    pub fn job_id(&self) -> Option<&str> {
        self.job.as_ref().map(|j| j.job_id.as_str())
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.values.get(key).and_then(Value::as_u64)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.values.get(key).and_then(Value::as_f64)
    }

    pub fn get_text(&self, key: &str) -> Option<&str> {
        self.values.get(key).and_then(Value::as_text)
    }

    /// Checks the structural invariants the wire format relies on.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.timestamp < 0 {
            return Err(ModelError::Timestamp(self.timestamp));
        }
        check_token("cluster", &self.cluster)?;
        check_token("node", &self.node)?;
        for (name, value) in &self.values {
            if !is_counter_name(name) {
                return Err(ModelError::CounterName(name.clone()));
            }
            match value {
                Value::Float(f) if !f.is_finite() => {
                    return Err(ModelError::NonFinite(name.clone()))
                }
                Value::Text(s) if s.is_empty() => return Err(ModelError::EmptyText(name.clone())),
                _ => {}
            }
        }
        if let Some(job) = &self.job {
            check_token("job", &job.job_id)?;
            if let Some(details) = &job.details {
                if details.user_id.is_empty() {
                    return Err(ModelError::EmptyText("job.user".into()));
                }
                if details.partition.is_empty() {
                    return Err(ModelError::EmptyText("job.part".into()));
                }
                if details.job_start > self.timestamp {
                    return Err(ModelError::JobStart {
                        job: job.job_id.clone(),
                        start: details.job_start,
                        ts: self.timestamp,
                    });
                }
            }
        }
        Ok(())
    }
}

/// `[A-Za-z0-9_.:-]+`
pub fn is_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(is_token_byte)
}

pub(crate) fn is_token_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b':' | b'-')
}

/// `[A-Za-z0-9_.]+`, excluding the reserved header keys and the job prefix.
pub fn is_counter_name(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.')
        && !RESERVED_KEYS.contains(&s)
        && !s.starts_with(JOB_KEY_PREFIX)
}

fn check_token(field: &'static str, value: &str) -> Result<(), ModelError> {
    if is_token(value) {
        Ok(())
    } else {
        Err(ModelError::Token {
            field,
            value: value.to_string(),
        })
    }
}

/// Hardware description of one node type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub node_type: String,
    pub sockets: u32,
    pub cores_per_socket: u32,
    /// FLOPs contributed by one occurrence of each floating-point event.
    pub flop_weights: BTreeMap<String, u32>,
    #[serde(default = "default_cacheline")]
    pub cacheline_bytes: u32,
    /// Peak of one socket, GFLOP/s. Derived metrics are per socket too.
    pub peak_gflops: f64,
    /// Peak memory bandwidth of one socket, GB/s.
    pub peak_bw_gbs: f64,
    pub ram_gib: f64,
    #[serde(default)]
    pub gpu_count: u32,
    /// Marks node types bought for their memory capacity.
    #[serde(default)]
    pub large_memory: bool,
}

fn default_cacheline() -> u32 {
    64
}

/// The default floating-point event set and the FLOPs per event.
pub fn default_flop_weights() -> BTreeMap<String, u32> {
    [
        ("fp_scalar_single", 1),
        ("fp_scalar_double", 1),
        ("fp_128_packed_single", 4),
        ("fp_128_packed_double", 2),
        ("fp_256_packed_single", 8),
        ("fp_256_packed_double", 4),
        ("fp_512_packed_single", 16),
        ("fp_512_packed_double", 8),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl MachineSpec {
    pub fn cores_per_node(&self) -> u32 {
        self.sockets * self.cores_per_socket
    }

    /// Intensity (FLOP/Byte) at which the compute and bandwidth ceilings meet.
    pub fn ridge_point(&self) -> f64 {
        self.peak_gflops / self.peak_bw_gbs
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: &str| ModelError::MachineSpec {
            node_type: self.node_type.clone(),
            reason: reason.to_string(),
        };
        if self.sockets == 0 || self.cores_per_socket == 0 {
            return Err(fail("sockets and cores_per_socket must be positive"));
        }
        if self.cacheline_bytes == 0 {
            return Err(fail("cacheline_bytes must be positive"));
        }
        if !(self.peak_gflops > 0.0 && self.peak_gflops.is_finite()) {
            return Err(fail("peak_gflops must be positive"));
        }
        if !(self.peak_bw_gbs > 0.0 && self.peak_bw_gbs.is_finite()) {
            return Err(fail("peak_bw_gbs must be positive"));
        }
        if self.ram_gib.is_nan() || self.ram_gib <= 0.0 {
            return Err(fail("ram_gib must be positive"));
        }
        if self.flop_weights.values().any(|&w| w == 0) {
            return Err(fail("flop weights must be positive"));
        }
        if self.flop_weights.keys().any(|k| !is_counter_name(k)) {
            return Err(fail("flop weight keys must be counter names"));
        }
        let ridge = self.ridge_point();
        if !(ridge.is_finite() && ridge > 0.0) {
            return Err(fail("ridge point must be finite and positive"));
        }
        Ok(())
    }
}

/// Node-type catalog used for derivation, ceilings and detector thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineCatalog {
    /// RAM of a standard (not large-memory) node, GiB.
    pub standard_ram_gib: f64,
    pub default_node_type: String,
    pub node_types: BTreeMap<String, MachineSpec>,
}

impl MachineCatalog {
    pub fn from_yaml(text: &str) -> Result<Self, crate::Error> {
        let mut catalog: MachineCatalog = serde_yaml::from_str(text)?;
        for (name, spec) in catalog.node_types.iter_mut() {
            if spec.node_type.is_empty() {
                spec.node_type = name.clone();
            }
            spec.validate()?;
        }
        if !catalog.node_types.contains_key(&catalog.default_node_type) {
            return Err(crate::Error::Config(format!(
                "default node type {} missing from catalog",
                catalog.default_node_type
            )));
        }
        Ok(catalog)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    pub fn get(&self, node_type: &str) -> Option<&MachineSpec> {
        self.node_types.get(node_type)
    }

    /// Looks up a node type, falling back to the catalog default.
    pub fn resolve(&self, node_type: Option<&str>) -> &MachineSpec {
        node_type
            .and_then(|t| self.node_types.get(t))
            .unwrap_or_else(|| &self.node_types[&self.default_node_type])
    }

    /// Three-type catalog modelled on a typical two-socket cluster: standard
    /// nodes, GPU nodes and large-memory nodes.
    pub fn builtin() -> Self {
        let base = MachineSpec {
            node_type: String::new(),
            sockets: 2,
            cores_per_socket: 20,
            flop_weights: default_flop_weights(),
            cacheline_bytes: 64,
            peak_gflops: 1075.2,
            peak_bw_gbs: 128.0,
            ram_gib: 192.0,
            gpu_count: 0,
            large_memory: false,
        };
        let mut node_types = BTreeMap::new();
        node_types.insert(
            "cpu".to_string(),
            MachineSpec {
                node_type: "cpu".into(),
                ..base.clone()
            },
        );
        node_types.insert(
            "gpu".to_string(),
            MachineSpec {
                node_type: "gpu".into(),
                gpu_count: 2,
                ..base.clone()
            },
        );
        node_types.insert(
            "bigmem".to_string(),
            MachineSpec {
                node_type: "bigmem".into(),
                ram_gib: 768.0,
                large_memory: true,
                ..base
            },
        );
        MachineCatalog {
            standard_ram_gib: 192.0,
            default_node_type: "cpu".into(),
            node_types,
        }
    }
}

/// Job index entry derived from stored samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobIndexEntry {
    pub job_id: String,
    pub cluster: String,
    pub user: Option<String>,
    pub partition: Option<String>,
    pub node_type: Option<String>,
    pub first_ts: i64,
    pub last_ts: i64,
    pub node_count: u32,
    pub cores_allocated: u32,
    pub gpus_allocated: u32,
    pub interval_s: i64,
    pub core_hours: f64,
}

/// Core-hours of a job observed from `first_ts` to `last_ts`; the last sample
/// stands for one full interval.
pub fn core_hours(cores_allocated: u32, first_ts: i64, last_ts: i64, interval_s: i64) -> f64 {
    cores_allocated as f64 * (last_ts - first_ts + interval_s) as f64 / 3600.0
}
