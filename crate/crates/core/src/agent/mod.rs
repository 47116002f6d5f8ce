//! The per-node sampling daemon.
//!
//! Every node wakes at the same multiples of the interval (its own clock,
//! no coordination), asks the batch system whether it is running exactly one
//! job, and only then samples. Otherwise a single heartbeat line goes out.

pub mod batch;
pub mod emit;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::OpenOptions;
use std::io;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::logline::encode_logline;
use crate::model::{JobContext, MachineSpec, MetricSample, Source, Value};
use crate::sampler::{Backend, SampleContext, SamplerSet};
use crate::Error;

pub use batch::{BatchAdapter, BatchError, MockBatch, MockJob, NodeState, SlurmAdapter};
pub use emit::{open_emitter, EmitTarget, Emitter, MemoryEmitter};

pub const DEFAULT_INTERVAL_S: u64 = 600;
pub const MIN_INTERVAL_S: u64 = 10;
pub const RETRY_BUFFER_LINES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchAdapterKind {
    #[default]
    Slurm,
    /// Jobs from the YAML file named by `mock_jobs`.
    Mock,
    None,
}

fn default_interval() -> u64 {
    DEFAULT_INTERVAL_S
}

fn default_sources() -> BTreeSet<Source> {
    Source::ALL.into_iter().collect()
}

fn default_suspend_flag() -> PathBuf {
    PathBuf::from("/run/hpcmon/suspend")
}

fn default_perf_window() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default = "default_interval")]
    pub interval_s: u64,
    pub cluster: String,
    /// Node type in the machine catalog; the catalog default when absent.
    #[serde(default)]
    pub machine_spec_ref: Option<String>,
    #[serde(default = "default_sources")]
    pub enabled_sources: BTreeSet<Source>,
    #[serde(default)]
    pub emit_target: EmitTarget,
    #[serde(default)]
    pub batch_adapter: BatchAdapterKind,
    #[serde(default)]
    pub mock_jobs: Option<PathBuf>,
    #[serde(default = "default_suspend_flag")]
    pub suspend_flag_path: PathBuf,
    #[serde(default)]
    pub catalog_path: Option<PathBuf>,
    /// Length of the perf measurement window inside each interval.
    #[serde(default = "default_perf_window")]
    pub perf_window_s: u64,
}

fn merge_yaml(base: &mut serde_yaml::Value, over: serde_yaml::Value) {
    match (base, over) {
        (serde_yaml::Value::Mapping(b), serde_yaml::Value::Mapping(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_yaml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl AgentConfig {
    pub fn new(cluster: &str) -> Self {
        AgentConfig {
            interval_s: DEFAULT_INTERVAL_S,
            cluster: cluster.to_string(),
            machine_spec_ref: None,
            enabled_sources: default_sources(),
            emit_target: EmitTarget::Stdout,
            batch_adapter: BatchAdapterKind::None,
            mock_jobs: None,
            suspend_flag_path: default_suspend_flag(),
            catalog_path: None,
            perf_window_s: default_perf_window(),
        }
    }

    /// Parses a config. A top-level `machine_types` map holds per-node-type
    /// overrides; the entry for the selected type (`node_type`, else
    /// `machine_spec_ref`) is merged over the base before validation.
    pub fn from_yaml(text: &str, node_type: Option<&str>) -> Result<Self, Error> {
        let mut root: serde_yaml::Value = serde_yaml::from_str(text)?;
        let overrides = root
            .as_mapping_mut()
            .and_then(|m| m.remove("machine_types"))
            .unwrap_or(serde_yaml::Value::Null);
        let selected = node_type.map(str::to_string).or_else(|| {
            root.get("machine_spec_ref")
                .and_then(|v| v.as_str())
                .map(str::to_string)
        });
        if let Some(name) = selected {
            if let Some(over) = overrides.get(name.as_str()) {
                merge_yaml(&mut root, over.clone());
            }
            if let Some(m) = root.as_mapping_mut() {
                m.insert("machine_spec_ref".into(), name.into());
            }
        }
        let config: AgentConfig = serde_yaml::from_value(root)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, node_type: Option<&str>) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_yaml(&text, node_type)?;
        // Relative file references are taken from the config's directory.
        if let Some(dir) = path.parent() {
            for p in [&mut config.mock_jobs, &mut config.catalog_path]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.interval_s < MIN_INTERVAL_S {
            return Err(Error::Config(format!(
                "interval_s must be at least {MIN_INTERVAL_S}, got {}",
                self.interval_s
            )));
        }
        if self.enabled_sources.is_empty() {
            return Err(Error::Config("enabled_sources is empty".into()));
        }
        if !crate::model::is_token(&self.cluster) {
            return Err(Error::Config(format!(
                "invalid cluster name {:?}",
                self.cluster
            )));
        }
        if self.batch_adapter == BatchAdapterKind::Mock && self.mock_jobs.is_none() {
            return Err(Error::Config("batch_adapter mock needs mock_jobs".into()));
        }
        if self.perf_window_s == 0 || self.perf_window_s > self.interval_s {
            return Err(Error::Config(
                "perf_window_s must be in 1..=interval_s".into(),
            ));
        }
        Ok(())
    }
}

/// Smallest multiple of `interval_s` strictly after `now`.
pub fn next_deadline(now: i64, interval_s: u64) -> i64 {
    assert!(interval_s > 0, "interval must be positive");
    let iv = interval_s as i64;
    (now.div_euclid(iv) + 1) * iv
}

/// Creates the suspend flag. Succeeds if it already exists.
pub fn suspend(flag: &Path) -> io::Result<()> {
    if let Some(parent) = flag.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(flag)
        .map(|_| ())
}

/// Removes the suspend flag. Succeeds if it is already gone.
pub fn resume(flag: &Path) -> io::Result<()> {
    match std::fs::remove_file(flag) {
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        other => other,
    }
}

pub fn is_suspended(flag: &Path) -> bool {
    flag.exists()
}

/// What the agent decided at a cycle boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleState {
    Exclusive,
    Shared,
    Idle,
    /// The batch query failed; handled like idle.
    Unknown,
    Suspended,
    /// No batch system configured; samples carry no job.
    Continuous,
}

impl CycleState {
    pub fn collects(self) -> bool {
        matches!(self, CycleState::Exclusive | CycleState::Continuous)
    }

    /// Heartbeat `state` value.
    pub fn heartbeat_label(self) -> &'static str {
        match self {
            CycleState::Shared => "shared",
            CycleState::Suspended => "suspended",
            CycleState::Exclusive => "exclusive",
            CycleState::Continuous => "continuous",
            CycleState::Idle | CycleState::Unknown => "idle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CycleOutcome {
    pub deadline: i64,
    pub state: CycleState,
    /// Lines produced this cycle, in emission order.
    pub lines: Vec<String>,
    /// Lines delivered to the target this cycle, including retried ones.
    pub delivered: usize,
    pub buffered: usize,
    pub dropped_total: u64,
    pub sampler_errors: usize,
}

/// Wall clock seen by the loop.
pub trait Clock {
    fn now(&self) -> i64;
    fn sleep_until(&self, t: i64);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    }

    fn sleep_until(&self, t: i64) {
        loop {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0);
            if now >= t as f64 {
                return;
            }
            std::thread::sleep(std::time::Duration::from_secs_f64(
                (t as f64 - now).min(60.0),
            ));
        }
    }
}

pub struct Agent {
    config: AgentConfig,
    spec: MachineSpec,
    node: String,
    samplers: SamplerSet,
    batch: Option<Box<dyn BatchAdapter>>,
    emitter: Box<dyn Emitter>,
    pending: VecDeque<(i64, String)>,
    dropped: u64,
    overrun: bool,
}

impl Agent {
    /// `batch == None` runs in continuous mode.
    pub fn new(
        config: AgentConfig,
        spec: MachineSpec,
        node: &str,
        backend: Box<dyn Backend>,
        batch: Option<Box<dyn BatchAdapter>>,
        emitter: Box<dyn Emitter>,
    ) -> Result<Self, Error> {
        config.validate()?;
        spec.validate()?;
        if !crate::model::is_token(node) {
            return Err(Error::Config(format!("invalid node name {node:?}")));
        }
        let mut sources = config.enabled_sources.clone();
        if spec.gpu_count == 0 {
            sources.remove(&Source::Gpu);
        }
        Ok(Agent {
            samplers: SamplerSet::new(sources, backend),
            config,
            spec,
            node: node.to_string(),
            batch,
            emitter,
            pending: VecDeque::new(),
            dropped: 0,
            overrun: false,
        })
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn pending_lines(&self) -> usize {
        self.pending.len()
    }

    pub fn dropped_lines(&self) -> u64 {
        self.dropped
    }

    pub fn disabled_sources(&self) -> &BTreeMap<Source, String> {
        self.samplers.disabled()
    }

    fn determine_state(&self, deadline: i64) -> (CycleState, Option<JobContext>) {
        if is_suspended(&self.config.suspend_flag_path) {
            return (CycleState::Suspended, None);
        }
        let Some(batch) = &self.batch else {
            return (CycleState::Continuous, None);
        };
        match batch.node_state(&self.node, deadline) {
            Ok(NodeState { job: Some(job), .. }) => (CycleState::Exclusive, Some(job)),
            Ok(ns) => match ns.state {
                crate::model::NodeStateKind::Shared => (CycleState::Shared, None),
                _ => (CycleState::Idle, None),
            },
            Err(e) => {
                warn!("{}: batch query failed, not sampling: {e}", self.node);
                (CycleState::Unknown, None)
            }
        }
    }

    fn stamp(&self, deadline: i64, source: Source) -> MetricSample {
        MetricSample::new(deadline, &self.config.cluster, &self.node, source)
    }

    fn add_facts(&mut self, sample: &mut MetricSample) {
        sample
            .values
            .insert("interval_s".into(), Value::Int(self.config.interval_s));
        sample
            .values
            .insert("node_type".into(), Value::Text(self.spec.node_type.clone()));
        if std::mem::take(&mut self.overrun) {
            sample.values.insert("overrun".into(), Value::Int(1));
        }
    }

    fn heartbeat(&mut self, deadline: i64, state: CycleState) -> MetricSample {
        let mut hb = self.stamp(deadline, Source::Software);
        hb.values
            .insert("state".into(), Value::Text(state.heartbeat_label().into()));
        self.add_facts(&mut hb);
        hb
    }

    /// Builds the samples of the cycle at `deadline` without emitting them.
    pub fn collect(&mut self, deadline: i64) -> (CycleState, Vec<MetricSample>, usize) {
        let (state, job) = self.determine_state(deadline);
        if !state.collects() {
            return (state, vec![self.heartbeat(deadline, state)], 0);
        }
        let ctx = SampleContext {
            t: deadline,
            spec: &self.spec,
            job: job.as_ref(),
        };
        let cycle = self.samplers.run(&ctx);
        let mut samples = Vec::with_capacity(cycle.drafts.len() + 1);
        for draft in cycle.drafts {
            let mut s = self.stamp(deadline, draft.source);
            s.socket = draft.socket;
            s.values = draft.values;
            s.job = job.clone();
            if s.source == Source::Software {
                self.add_facts(&mut s);
            }
            samples.push(s);
        }
        if !samples.iter().any(|s| s.source == Source::Software) {
            samples.push(self.heartbeat(deadline, state));
        }
        (state, samples, cycle.errors.len())
    }

    /// One full cycle: decide, sample, encode, emit.
    pub fn run_cycle(&mut self, deadline: i64) -> CycleOutcome {
        let (state, samples, sampler_errors) = self.collect(deadline);
        let mut lines = Vec::new();
        for sample in &samples {
            match encode_logline(sample) {
                Ok(encoded) => lines.extend(encoded.into_iter().map(|l| l.into_string())),
                Err(e) => warn!(
                    "{}: dropping unencodable {} sample: {e}",
                    self.node, sample.source
                ),
            }
        }
        let delivered = self.deliver(deadline, &lines);
        CycleOutcome {
            deadline,
            state,
            lines,
            delivered,
            buffered: self.pending.len(),
            dropped_total: self.dropped,
            sampler_errors,
        }
    }

    /// Retries the backlog, then sends this cycle's lines. Whatever cannot
    /// be sent stays queued, oldest dropped beyond the buffer limit.
    fn deliver(&mut self, ts: i64, lines: &[String]) -> usize {
        let mut delivered = 0;
        while let Some((t, line)) = self.pending.front() {
            if let Err(e) = self.emitter.emit(*t, line) {
                debug!("{}: emit still failing: {e}", self.node);
                break;
            }
            self.pending.pop_front();
            delivered += 1;
        }
        for line in lines {
            if self.pending.is_empty() {
                match self.emitter.emit(ts, line) {
                    Ok(()) => {
                        delivered += 1;
                        continue;
                    }
                    Err(e) => warn!("{}: emit failed, buffering: {e}", self.node),
                }
            }
            self.pending.push_back((ts, line.clone()));
        }
        while self.pending.len() > RETRY_BUFFER_LINES {
            self.pending.pop_front();
            self.dropped += 1;
        }
        if let Err(e) = self.emitter.flush() {
            warn!("{}: flush failed: {e}", self.node);
        }
        delivered
    }

    /// Records when the cycle at `deadline` finished and returns the next
    /// deadline to run. Finishing at or after the following deadline skips it
    /// and flags the next software line with `overrun=1`.
    pub fn finish_cycle(&mut self, deadline: i64, finished_at: i64) -> i64 {
        let iv = self.config.interval_s as i64;
        if finished_at >= deadline + iv {
            warn!(
                "{}: cycle {deadline} overran until {finished_at}",
                self.node
            );
            self.overrun = true;
            next_deadline(finished_at, self.config.interval_s)
        } else {
            deadline + iv
        }
    }

    /// Runs cycles until `max_cycles` is reached (forever when `None`).
    pub fn run_loop(&mut self, clock: &dyn Clock, max_cycles: Option<usize>) -> Vec<CycleOutcome> {
        let mut outcomes = Vec::new();
        let mut deadline = next_deadline(clock.now(), self.config.interval_s);
        let mut done = 0usize;
        while max_cycles.is_none_or(|m| done < m) {
            clock.sleep_until(deadline);
            let outcome = self.run_cycle(deadline);
            deadline = self.finish_cycle(deadline, clock.now());
            if max_cycles.is_some() {
                outcomes.push(outcome);
            }
            done += 1;
        }
        outcomes
    }
}
