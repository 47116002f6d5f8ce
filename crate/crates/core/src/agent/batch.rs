//! Batch-system adapters answering "what is running on this node?".

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JobContext, JobDetails, NodeStateKind};
use crate::sampler::adapters::{CommandRunner, SystemRunner};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BatchError {
    #[error("batch query failed: {0}")]
    Query(String),
    #[error("cannot parse batch output: {reason}: {raw:?}")]
    Parse { reason: String, raw: String },
}

/// Node state as reported by the batch system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeState {
    pub state: NodeStateKind,
    pub job: Option<JobContext>,
}

impl NodeState {
    pub fn idle() -> Self {
        NodeState {
            state: NodeStateKind::Idle,
            job: None,
        }
    }

    pub fn shared() -> Self {
        NodeState {
            state: NodeStateKind::Shared,
            job: None,
        }
    }

    pub fn exclusive(job: JobContext) -> Self {
        NodeState {
            state: NodeStateKind::Exclusive,
            job: Some(job),
        }
    }
}

pub trait BatchAdapter: Send {
    /// State of `node` at cycle time `at`.
    fn node_state(&self, node: &str, at: i64) -> Result<NodeState, BatchError>;
}

/// One job of the mock batch system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockJob {
    pub job_id: String,
    pub user: String,
    pub partition: String,
    /// Cores allocated on each node of the job.
    pub nodes: BTreeMap<String, u32>,
    #[serde(default)]
    pub gpus_per_node: u32,
    pub start: i64,
    /// Exclusive end; `None` runs forever.
    #[serde(default)]
    pub end: Option<i64>,
}

impl MockJob {
    fn running_at(&self, t: i64) -> bool {
        self.start <= t && self.end.is_none_or(|e| t < e)
    }
}

/// In-memory batch system for tests and simulations. Jobs are visible on a
/// node between their start and end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBatch {
    pub cores_per_node: u32,
    pub jobs: Vec<MockJob>,
    #[serde(default)]
    pub fail: bool,
}

impl MockBatch {
    pub fn new(cores_per_node: u32, jobs: Vec<MockJob>) -> Self {
        MockBatch {
            cores_per_node,
            jobs,
            fail: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))?;
        Ok(serde_yaml::from_str(&text)?)
    }
}

impl BatchAdapter for MockBatch {
    fn node_state(&self, node: &str, at: i64) -> Result<NodeState, BatchError> {
        if self.fail {
            return Err(BatchError::Query("mock failure".into()));
        }
        let jobs: Vec<&MockJob> = self
            .jobs
            .iter()
            .filter(|j| j.nodes.contains_key(node))
            .filter(|j| j.running_at(at))
            .collect();
        match jobs.as_slice() {
            [] => Ok(NodeState::idle()),
            [job] if job.nodes[node] >= self.cores_per_node => {
                Ok(NodeState::exclusive(JobContext::with_details(
                    job.job_id.clone(),
                    JobDetails {
                        user_id: job.user.clone(),
                        partition: job.partition.clone(),
                        num_nodes: job.nodes.len() as u32,
                        cores_allocated: job.nodes.values().sum(),
                        gpus_allocated: job.gpus_per_node * job.nodes.len() as u32,
                        node_state: NodeStateKind::Exclusive,
                        job_start: job.start,
                    },
                )))
            }
            _ => Ok(NodeState::shared()),
        }
    }
}

/// SLURM through its CLI:
///
/// * `scontrol show node <node> -o` for `CPUAlloc` / `CPUTot`
/// * `squeue -h -w <node> -t R -o %i|%u|%P|%D|%C|%b|%S` for the jobs
pub struct SlurmAdapter {
    runner: Box<dyn CommandRunner>,
}

impl Default for SlurmAdapter {
    fn default() -> Self {
        SlurmAdapter::new(Box::new(SystemRunner))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqueueRow {
    pub job_id: String,
    pub user: String,
    pub partition: String,
    pub num_nodes: u32,
    pub cpus: u32,
    pub gpus_per_node: u32,
    pub start: i64,
}

fn parse_err(reason: impl Into<String>, raw: &str) -> BatchError {
    BatchError::Parse {
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

/// GPU count from a `%b` (gres) column such as `gpu:2`, `gres/gpu:v100:2` or
/// `N/A`.
fn gres_gpus(gres: &str) -> u32 {
    gres.split(',')
        .filter(|g| g.contains("gpu"))
        .filter_map(|g| g.split('(').next()?.rsplit(':').next()?.parse::<u32>().ok())
        .sum()
}

pub fn parse_squeue(text: &str) -> Result<Vec<SqueueRow>, BatchError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.trim().split('|').collect();
            if cols.len() != 7 {
                return Err(parse_err("expected 7 columns", line));
            }
            let num = |s: &str| {
                s.parse::<u32>()
                    .map_err(|_| parse_err(format!("not a number: {s}"), line))
            };
            let start = NaiveDateTime::parse_from_str(cols[6], "%Y-%m-%dT%H:%M:%S")
                .map_err(|_| parse_err(format!("bad start time {}", cols[6]), line))?
                .and_utc()
                .timestamp();
            Ok(SqueueRow {
                job_id: cols[0].to_string(),
                user: cols[1].to_string(),
                partition: cols[2].to_string(),
                num_nodes: num(cols[3])?,
                cpus: num(cols[4])?,
                gpus_per_node: gres_gpus(cols[5]),
                start,
            })
        })
        .collect()
}

/// `(CPUAlloc, CPUTot)` from a one-line `scontrol show node`.
pub fn parse_scontrol_node(text: &str) -> Result<(u32, u32), BatchError> {
    let field = |name: &str| {
        text.split_whitespace()
            .find_map(|kv| kv.strip_prefix(name)?.strip_prefix('='))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| parse_err(format!("missing {name}"), text))
    };
    Ok((field("CPUAlloc")?, field("CPUTot")?))
}

impl SlurmAdapter {
    pub fn new(runner: Box<dyn CommandRunner>) -> Self {
        SlurmAdapter { runner }
    }

    fn run(&self, program: &str, args: &[&str]) -> Result<String, BatchError> {
        let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        self.runner
            .run(program, &args, None)
            .map_err(|e| BatchError::Query(format!("{program}: {e}")))
    }
}

impl BatchAdapter for SlurmAdapter {
    fn node_state(&self, node: &str, _at: i64) -> Result<NodeState, BatchError> {
        let jobs = parse_squeue(&self.run(
            "squeue",
            &["-h", "-w", node, "-t", "R", "-o", "%i|%u|%P|%D|%C|%b|%S"],
        )?)?;
        let (alloc, total) =
            parse_scontrol_node(&self.run("scontrol", &["show", "node", node, "-o"])?)?;
        match jobs.as_slice() {
            [] => Ok(NodeState::idle()),
            [job] if alloc == total => Ok(NodeState::exclusive(JobContext::with_details(
                job.job_id.clone(),
                JobDetails {
                    user_id: job.user.clone(),
                    partition: job.partition.clone(),
                    num_nodes: job.num_nodes,
                    cores_allocated: job.cpus,
                    gpus_allocated: job.gpus_per_node * job.num_nodes,
                    node_state: NodeStateKind::Exclusive,
                    job_start: job.start,
                },
            ))),
            _ => Ok(NodeState::shared()),
        }
    }
}
