//! Producers of raw counter samples for the six source categories.
//!
//! A [`Backend`] delivers cumulative readings (never rates); the
//! `sample_*` functions turn readings into [`SampleDraft`]s and
//! [`SamplerSet`] runs the enabled sources in sequence, keeping a failing
//! source from affecting the others.

pub mod adapters;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JobContext, MachineSpec, Source, Value};

pub use synthetic::{Phase, SyntheticBackend, WorkloadProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    /// The backend cannot serve this source at all (tool missing, no access).
    #[error("{src} sampler unavailable: {reason}")]
    Unavailable { src: Source, reason: String },
    #[error("cannot parse {tool} output: {reason}\n--- raw output ---\n{raw}")]
    Parse {
        tool: String,
        reason: String,
        raw: String,
    },
    #[error("{0}")]
    Domain(String),
}

impl SamplerError {
    pub fn unavailable(source: Source, reason: impl Into<String>) -> Self {
        SamplerError::Unavailable {
            src: source,
            reason: reason.into(),
        }
    }

    pub fn parse(tool: &str, reason: impl Into<String>, raw: &str) -> Self {
        SamplerError::Parse {
            tool: tool.to_string(),
            reason: reason.into(),
            raw: raw.to_string(),
        }
    }
}

/// External capabilities a sampler depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    PerfEvents,
    UncorePerfEvents,
    GpuCli,
    FilesystemCli,
    FabricCli,
    ProcessTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerDescriptor {
    pub source: Source,
    pub requires: Vec<Capability>,
    pub per_socket: bool,
}

pub fn descriptor(source: Source) -> SamplerDescriptor {
    let requires = match source {
        Source::CpuCore => vec![Capability::PerfEvents],
        Source::CpuUncore => vec![Capability::PerfEvents, Capability::UncorePerfEvents],
        Source::Gpu => vec![Capability::GpuCli],
        Source::Io => vec![Capability::FilesystemCli],
        Source::Network => vec![Capability::FabricCli],
        Source::Software => vec![Capability::ProcessTable],
    };
    SamplerDescriptor {
        source,
        requires,
        per_socket: source.per_socket(),
    }
}

/// Core PMU events sampled besides the floating-point events of the spec.
pub const CORE_BASE_EVENTS: [&str; 6] = [
    "cycles",
    "instructions",
    "ref_cycles",
    "branch_instructions",
    "branch_misses",
    "llc_misses",
];

/// What the sampler knows when it is invoked.
#[derive(Debug, Clone, Copy)]
pub struct SampleContext<'a> {
    /// Aligned cycle timestamp.
    pub t: i64,
    pub spec: &'a MachineSpec,
    pub job: Option<&'a JobContext>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoreReading {
    pub counters: BTreeMap<String, u64>,
    /// Events the hardware refused to count this time.
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UncoreReading {
    pub cas_count_rd: u64,
    pub cas_count_wr: u64,
    /// Inter-socket link traffic in flits.
    pub link_tx_flits: u64,
    pub link_rx_flits: u64,
    /// RAPL package and DRAM energy, microjoules, when the backend has them.
    pub pkg_energy_uj: Option<u64>,
    pub dram_energy_uj: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GpuReading {
    pub util_pct: u64,
    pub mem_used_mib: u64,
    pub mem_total_mib: u64,
    /// Board power draw; absent on devices that do not report it.
    pub power_mw: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IoReading {
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub opens: u64,
    pub closes: u64,
    pub read_calls: u64,
    pub write_calls: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkReading {
    pub port_xmit_bytes: u64,
    pub port_rcv_bytes: u64,
    pub xmit_pkts: u64,
    pub rcv_pkts: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftwareReading {
    pub task_count: u64,
    pub thread_count: u64,
    pub distinct_busy_cores: u64,
    pub rss_kib: u64,
    pub numa_imbalance_pct: f64,
    pub command: Option<String>,
}

/// Source of cumulative counter readings. Every method defaults to
/// "unavailable" so partial backends only implement what they serve.
pub trait Backend: Send {
    fn read_core(
        &mut self,
        ctx: &SampleContext<'_>,
        socket: u32,
        events: &[String],
    ) -> Result<CoreReading, SamplerError> {
        let _ = (ctx, socket, events);
        Err(SamplerError::unavailable(
            Source::CpuCore,
            "not supported by backend",
        ))
    }

    fn read_uncore(
        &mut self,
        ctx: &SampleContext<'_>,
        socket: u32,
    ) -> Result<UncoreReading, SamplerError> {
        let _ = (ctx, socket);
        Err(SamplerError::unavailable(
            Source::CpuUncore,
            "not supported by backend",
        ))
    }

    fn read_gpus(&mut self, ctx: &SampleContext<'_>) -> Result<Vec<GpuReading>, SamplerError> {
        let _ = ctx;
        Err(SamplerError::unavailable(
            Source::Gpu,
            "not supported by backend",
        ))
    }

    fn read_io(&mut self, ctx: &SampleContext<'_>) -> Result<IoReading, SamplerError> {
        let _ = ctx;
        Err(SamplerError::unavailable(
            Source::Io,
            "not supported by backend",
        ))
    }

    fn read_network(&mut self, ctx: &SampleContext<'_>) -> Result<NetworkReading, SamplerError> {
        let _ = ctx;
        Err(SamplerError::unavailable(
            Source::Network,
            "not supported by backend",
        ))
    }

    fn read_software(&mut self, ctx: &SampleContext<'_>) -> Result<SoftwareReading, SamplerError> {
        let _ = ctx;
        Err(SamplerError::unavailable(
            Source::Software,
            "not supported by backend",
        ))
    }
}

/// A sample before the agent stamps cluster, node, timestamp and job.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraft {
    pub source: Source,
    pub socket: Option<u32>,
    pub values: BTreeMap<String, Value>,
}

impl SampleDraft {
    fn new(source: Source, socket: Option<u32>) -> Self {
        SampleDraft {
            source,
            socket,
            values: BTreeMap::new(),
        }
    }

    fn put(&mut self, key: &str, value: impl Into<Value>) {
        self.values.insert(key.to_string(), value.into());
    }
}

pub fn core_events(spec: &MachineSpec) -> Vec<String> {
    CORE_BASE_EVENTS
        .iter()
        .map(|s| s.to_string())
        .chain(spec.flop_weights.keys().cloned())
        .collect()
}

pub fn sample_cpu_core(
    ctx: &SampleContext<'_>,
    backend: &mut dyn Backend,
) -> Result<Vec<SampleDraft>, SamplerError> {
    let events = core_events(ctx.spec);
    (0..ctx.spec.sockets)
        .map(|socket| {
            let reading = backend.read_core(ctx, socket, &events)?;
            let mut d = SampleDraft::new(Source::CpuCore, Some(socket));
            for (name, v) in reading.counters {
                d.put(&name, v);
            }
            if reading
                .rejected
                .iter()
                .any(|e| ctx.spec.flop_weights.contains_key(e))
            {
                d.put("degraded", 1u64);
            }
            Ok(d)
        })
        .collect()
}

pub fn sample_cpu_uncore(
    ctx: &SampleContext<'_>,
    backend: &mut dyn Backend,
) -> Result<Vec<SampleDraft>, SamplerError> {
    (0..ctx.spec.sockets)
        .map(|socket| {
            let r = backend.read_uncore(ctx, socket)?;
            let mut d = SampleDraft::new(Source::CpuUncore, Some(socket));
            d.put("cas_count_rd", r.cas_count_rd);
            d.put("cas_count_wr", r.cas_count_wr);
            d.put("link_rx_flits", r.link_rx_flits);
            d.put("link_tx_flits", r.link_tx_flits);
            if let Some(e) = r.pkg_energy_uj {
                d.put("pkg_energy_uj", e);
            }
            if let Some(e) = r.dram_energy_uj {
                d.put("dram_energy_uj", e);
            }
            Ok(d)
        })
        .collect()
}

/// One sample with `gpu<i>_*` values per device; none when the node type has
/// no GPUs.
pub fn sample_gpu(
    ctx: &SampleContext<'_>,
    backend: &mut dyn Backend,
) -> Result<Vec<SampleDraft>, SamplerError> {
    if ctx.spec.gpu_count == 0 {
        return Ok(Vec::new());
    }
    let gpus = backend.read_gpus(ctx)?;
    let mut d = SampleDraft::new(Source::Gpu, None);
    for (i, g) in gpus.iter().enumerate() {
        d.put(&format!("gpu{i}_util"), g.util_pct);
        d.put(&format!("gpu{i}_mem_used_mib"), g.mem_used_mib);
        d.put(&format!("gpu{i}_mem_total_mib"), g.mem_total_mib);
        if let Some(p) = g.power_mw {
            d.put(&format!("gpu{i}_power_mw"), p);
        }
    }
    Ok(vec![d])
}

pub fn sample_io(
    ctx: &SampleContext<'_>,
    backend: &mut dyn Backend,
) -> Result<Vec<SampleDraft>, SamplerError> {
    let r = backend.read_io(ctx)?;
    let mut d = SampleDraft::new(Source::Io, None);
    d.put("bytes_read", r.bytes_read);
    d.put("bytes_written", r.bytes_written);
    d.put("opens", r.opens);
    d.put("closes", r.closes);
    d.put("read_calls", r.read_calls);
    d.put("write_calls", r.write_calls);
    Ok(vec![d])
}

pub fn sample_network(
    ctx: &SampleContext<'_>,
    backend: &mut dyn Backend,
) -> Result<Vec<SampleDraft>, SamplerError> {
    let r = backend.read_network(ctx)?;
    let mut d = SampleDraft::new(Source::Network, None);
    d.put("port_xmit_bytes", r.port_xmit_bytes);
    d.put("port_rcv_bytes", r.port_rcv_bytes);
    d.put("xmit_pkts", r.xmit_pkts);
    d.put("rcv_pkts", r.rcv_pkts);
    Ok(vec![d])
}

pub fn sample_software(
    ctx: &SampleContext<'_>,
    backend: &mut dyn Backend,
) -> Result<Vec<SampleDraft>, SamplerError> {
    let r = backend.read_software(ctx)?;
    let mut d = SampleDraft::new(Source::Software, None);
    d.put("task_count", r.task_count);
    d.put("thread_count", r.thread_count);
    d.put("distinct_busy_cores", r.distinct_busy_cores);
    d.put("rss_kib", r.rss_kib);
    d.put("numa_imbalance_pct", r.numa_imbalance_pct);
    if let Some(cmd) = r.command.filter(|c| !c.is_empty()) {
        d.put("cmd", cmd);
    }
    Ok(vec![d])
}

pub fn sample_source(
    source: Source,
    ctx: &SampleContext<'_>,
    backend: &mut dyn Backend,
) -> Result<Vec<SampleDraft>, SamplerError> {
    match source {
        Source::CpuCore => sample_cpu_core(ctx, backend),
        Source::CpuUncore => sample_cpu_uncore(ctx, backend),
        Source::Gpu => sample_gpu(ctx, backend),
        Source::Io => sample_io(ctx, backend),
        Source::Network => sample_network(ctx, backend),
        Source::Software => sample_software(ctx, backend),
    }
}

/// Output of one sampling pass.
#[derive(Debug, Default)]
pub struct CycleSamples {
    pub drafts: Vec<SampleDraft>,
    pub errors: Vec<(Source, SamplerError)>,
}

/// The enabled samplers of one agent, one per source, sharing a backend.
pub struct SamplerSet {
    enabled: BTreeSet<Source>,
    disabled: BTreeMap<Source, String>,
    backend: Box<dyn Backend>,
}

impl SamplerSet {
    pub fn new(enabled: impl IntoIterator<Item = Source>, backend: Box<dyn Backend>) -> Self {
        SamplerSet {
            enabled: enabled.into_iter().collect(),
            disabled: BTreeMap::new(),
            backend,
        }
    }

    pub fn active(&self) -> impl Iterator<Item = Source> + '_ {
        self.enabled
            .iter()
            .copied()
            .filter(|s| !self.disabled.contains_key(s))
    }

    pub fn disabled(&self) -> &BTreeMap<Source, String> {
        &self.disabled
    }

    /// Runs every active sampler in source order. An unavailable source is
    /// disabled for the rest of the agent's life; other errors only cost
    /// this cycle's sample of that source.
    pub fn run(&mut self, ctx: &SampleContext<'_>) -> CycleSamples {
        let mut out = CycleSamples::default();
        let sources: Vec<Source> = self.active().collect();
        for source in sources {
            match sample_source(source, ctx, self.backend.as_mut()) {
                Ok(drafts) => out.drafts.extend(drafts),
                Err(err) => {
                    if let SamplerError::Unavailable { reason, .. } = &err {
                        warn!("disabling {source} sampler: {reason}");
                        self.disabled.insert(source, reason.clone());
                    } else {
                        warn!("{source} sampler failed: {err}");
                    }
                    out.errors.push((source, err));
                }
            }
        }
        out
    }
}
