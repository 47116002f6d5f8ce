//! Deterministic synthetic backend driven by piecewise-constant workload
//! profiles.
//!
//! Core, uncore and FP rates are per socket; everything else is per node.
//! Cumulative counters are the exact integral of the phase rates from the
//! profile start (or the latest injected reset) to the query time, rounded
//! once per phase so they never decrease.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Backend, CoreReading, GpuReading, IoReading, NetworkReading, SampleContext, SamplerError,
    SoftwareReading, UncoreReading,
};

const GPU_IDLE_MW: u64 = 45_000;
const GPU_MW_PER_PCT: u64 = 2_500;

/// One constant-rate stretch of a workload.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase {
    pub duration_s: u64,
    /// FP events per second per socket, keyed by event name.
    pub fp_events_per_s: BTreeMap<String, f64>,
    pub instructions_per_s: f64,
    pub cycles_per_s: f64,
    /// DRAM traffic per socket, bytes/s.
    pub mem_bytes_per_s: f64,
    /// Share of DRAM traffic that is reads; 0.5 when unset.
    pub mem_read_fraction: Option<f64>,
    pub link_bytes_per_s: f64,
    pub gpu_util_pct: Vec<u64>,
    pub gpu_mem_used_mib: Vec<u64>,
    pub net_xmit_bytes_per_s: f64,
    pub net_rcv_bytes_per_s: f64,
    pub io_read_bytes_per_s: f64,
    pub io_write_bytes_per_s: f64,
    pub io_opens_per_s: f64,
    pub rss_kib: u64,
    pub task_count: u64,
    /// Defaults to `task_count`.
    pub thread_count: Option<u64>,
    pub busy_cores: u64,
    pub numa_imbalance_pct: f64,
}

fn default_packet_bytes() -> f64 {
    4096.0
}

fn default_io_request_bytes() -> f64 {
    1048576.0
}

fn default_gpu_mem_total() -> u64 {
    16384
}

/// A replayable synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadProfile {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Epoch second at which counters start integrating.
    #[serde(default)]
    pub start: i64,
    /// Loop the phase list instead of holding the last phase forever.
    #[serde(default)]
    pub repeat: bool,
    /// Per-node rate scatter: every rate of a node is scaled by a factor drawn
    /// uniformly from `[1 - jitter, 1 + jitter]`, seeded by (seed, node).
    #[serde(default)]
    pub node_jitter: f64,
    /// Epoch seconds at which all cumulative counters drop back to zero.
    #[serde(default)]
    pub resets: Vec<i64>,
    #[serde(default)]
    pub command: Option<String>,
    #[serde(default = "default_gpu_mem_total")]
    pub gpu_mem_total_mib: u64,
    #[serde(default = "default_packet_bytes")]
    pub packet_bytes: f64,
    #[serde(default = "default_io_request_bytes")]
    pub io_request_bytes: f64,
    pub phases: Vec<Phase>,
}

impl WorkloadProfile {
    /// A single never-ending phase starting at `start`.
    pub fn constant(name: &str, start: i64, phase: Phase) -> Self {
        WorkloadProfile {
            name: name.to_string(),
            seed: 0,
            start,
            repeat: false,
            node_jitter: 0.0,
            resets: Vec::new(),
            command: None,
            gpu_mem_total_mib: default_gpu_mem_total(),
            packet_bytes: default_packet_bytes(),
            io_request_bytes: default_io_request_bytes(),
            phases: vec![Phase {
                duration_s: 3600,
                ..phase
            }],
        }
    }

    pub fn from_yaml(text: &str) -> Result<Self, crate::Error> {
        let profile: WorkloadProfile = serde_yaml::from_str(text)?;
        profile.validate().map_err(crate::Error::Sampler)?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |msg: String| {
            Err(SamplerError::Domain(format!(
                "profile {}: {msg}",
                self.name
            )))
        };
        if self.phases.is_empty() {
            return bad("no phases".into());
        }
        if !(0.0..1.0).contains(&self.node_jitter) {
            return bad("node_jitter must be in [0, 1)".into());
        }
        if !(self.packet_bytes > 0.0 && self.io_request_bytes > 0.0) {
            return bad("packet_bytes and io_request_bytes must be positive".into());
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.duration_s == 0 {
                return bad(format!("phase {i} has zero duration"));
            }
            let rates = [
                p.instructions_per_s,
                p.cycles_per_s,
                p.mem_bytes_per_s,
                p.link_bytes_per_s,
                p.net_xmit_bytes_per_s,
                p.net_rcv_bytes_per_s,
                p.io_read_bytes_per_s,
                p.io_write_bytes_per_s,
                p.io_opens_per_s,
                p.numa_imbalance_pct,
            ];
            if rates
                .iter()
                .chain(p.fp_events_per_s.values())
                .any(|r| !(r.is_finite() && *r >= 0.0))
            {
                return bad(format!("phase {i} has a negative or non-finite rate"));
            }
            if let Some(f) = p.mem_read_fraction {
                if !(0.0..=1.0).contains(&f) {
                    return bad(format!("phase {i} mem_read_fraction outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    fn period(&self) -> u64 {
        self.phases.iter().map(|p| p.duration_s).sum()
    }

    /// Phase active at `offset` seconds after the start.
    fn phase_at(&self, offset: u64) -> &Phase {
        let mut off = if self.repeat {
            offset % self.period()
        } else {
            offset
        };
        for p in &self.phases {
            if off < p.duration_s {
                return p;
            }
            off -= p.duration_s;
        }
        self.phases.last().expect("validated non-empty")
    }

    /// Integral of `rate` over `[0, offset)` seconds from the start, rounded
    /// per phase.
    fn integral(&self, offset: u64, rate: &dyn Fn(&Phase) -> f64) -> u128 {
        let round = |r: f64, secs: u64| (r * secs as f64).round() as u128;
        let mut total = 0u128;
        let mut rest = offset;
        if self.repeat {
            let period = self.period();
            let per_period: u128 = self
                .phases
                .iter()
                .map(|p| round(rate(p), p.duration_s))
                .sum();
            total += per_period * (rest / period) as u128;
            rest %= period;
        }
        let last = self.phases.len() - 1;
        for (i, p) in self.phases.iter().enumerate() {
            if rest == 0 {
                break;
            }
            let span = if i == last && !self.repeat {
                rest
            } else {
                rest.min(p.duration_s)
            };
            total += round(rate(p), span);
            rest -= span;
        }
        total
    }
}

#[derive(Debug, Clone)]
struct Scheduled {
    start: i64,
    profile: Arc<WorkloadProfile>,
    scale: f64,
}

/// Synthetic counters for one node. A node may run a schedule of profiles
/// back to back; its counters accumulate across all of them.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    node: String,
    schedule: Vec<Scheduled>,
    resets: Vec<i64>,
    gpu_count: Option<usize>,
}

/// FNV-1a, stable across platforms and releases.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

fn node_scale(profile: &WorkloadProfile, node: &str) -> f64 {
    if profile.node_jitter == 0.0 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed ^ stable_hash(node));
    1.0 + profile.node_jitter * rng.gen_range(-1.0..=1.0)
}

impl SyntheticBackend {
    pub fn new(profile: WorkloadProfile, node: &str) -> Self {
        let start = profile.start;
        Self::with_schedule(node, vec![(start, Arc::new(profile))])
    }

    /// `schedule` lists (start, profile) pairs; each profile runs until the
    /// next one starts.
    pub fn with_schedule(node: &str, mut schedule: Vec<(i64, Arc<WorkloadProfile>)>) -> Self {
        schedule.sort_by_key(|(start, _)| *start);
        let mut resets: Vec<i64> = schedule
            .iter()
            .flat_map(|(_, p)| p.resets.iter().copied())
            .collect();
        resets.sort_unstable();
        SyntheticBackend {
            node: node.to_string(),
            schedule: schedule
                .into_iter()
                .map(|(start, profile)| Scheduled {
                    scale: node_scale(&profile, node),
                    start,
                    profile,
                })
                .collect(),
            resets,
            gpu_count: None,
        }
    }

    /// Fixes the number of GPUs reported (zero-padded beyond the profile's
    /// lists).
    pub fn with_gpus(mut self, count: usize) -> Self {
        self.gpu_count = Some(count);
        self
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    fn check_time(&self, t: i64) -> Result<(), SamplerError> {
        match self.schedule.first() {
            Some(first) if t >= first.start => Ok(()),
            Some(first) => Err(SamplerError::Domain(format!(
                "query time {t} precedes profile start {}",
                first.start
            ))),
            None => Err(SamplerError::Domain("empty schedule".into())),
        }
    }

    /// Cumulative value of a counter with per-phase `rate` at time `t`.
    pub fn counter(&self, t: i64, rate: &dyn Fn(&Phase) -> f64) -> Result<u64, SamplerError> {
        self.check_time(t)?;
        let base = self
            .resets
            .iter()
            .rev()
            .find(|&&r| r <= t)
            .copied()
            .unwrap_or(i64::MIN);
        let mut total = 0u128;
        for (i, entry) in self.schedule.iter().enumerate() {
            let end = self.schedule.get(i + 1).map_or(t, |next| next.start.min(t));
            let from = entry.start.max(base);
            if end <= from {
                continue;
            }
            let scaled = |p: &Phase| rate(p) * entry.scale;
            let upto = (end - entry.start) as u64;
            let skip = (from - entry.start) as u64;
            total += entry.profile.integral(upto, &scaled) - entry.profile.integral(skip, &scaled);
        }
        // Hardware counters are 64-bit and wrap.
        Ok(total as u64)
    }

    /// Phase and node scale in effect just before `t`.
    fn gauge_phase(&self, t: i64) -> Result<(&WorkloadProfile, &Phase, f64), SamplerError> {
        self.check_time(t)?;
        let at = (t - 1).max(self.schedule[0].start);
        let entry = self
            .schedule
            .iter()
            .rev()
            .find(|e| e.start <= at)
            .expect("checked against first start");
        let phase = entry.profile.phase_at((at - entry.start) as u64);
        Ok((&entry.profile, phase, entry.scale))
    }

    fn profile_at(&self, t: i64) -> Result<&WorkloadProfile, SamplerError> {
        self.gauge_phase(t).map(|(p, _, _)| p)
    }
}

/// Reference clock over core clock.
const REF_CLOCK_RATIO: f64 = 0.875;
const BRANCH_SHARE: f64 = 0.15;
const BRANCH_MISS_RATE: f64 = 0.01;

/// Socket power: idle floor plus a share proportional to core activity.
fn pkg_watts(p: &Phase, spec: &crate::model::MachineSpec) -> f64 {
    let full = spec.cores_per_socket as f64 * 2.4e9;
    40.0 + 110.0 * (p.cycles_per_s / full).min(1.0)
}

fn dram_watts(p: &Phase) -> f64 {
    4.0 + p.mem_bytes_per_s / 1e10
}

fn fp_rate(event: &str) -> impl Fn(&Phase) -> f64 + '_ {
    move |p: &Phase| p.fp_events_per_s.get(event).copied().unwrap_or(0.0)
}

impl Backend for SyntheticBackend {
    fn read_core(
        &mut self,
        ctx: &SampleContext<'_>,
        _socket: u32,
        events: &[String],
    ) -> Result<CoreReading, SamplerError> {
        let mut reading = CoreReading::default();
        for event in events {
            let value = match event.as_str() {
                "cycles" => self.counter(ctx.t, &|p| p.cycles_per_s)?,
                "instructions" => self.counter(ctx.t, &|p| p.instructions_per_s)?,
                "ref_cycles" => self.counter(ctx.t, &|p| p.cycles_per_s * REF_CLOCK_RATIO)?,
                "branch_instructions" => {
                    self.counter(ctx.t, &|p| p.instructions_per_s * BRANCH_SHARE)?
                }
                "branch_misses" => self.counter(ctx.t, &|p| {
                    p.instructions_per_s * BRANCH_SHARE * BRANCH_MISS_RATE
                })?,
                "llc_misses" => self.counter(ctx.t, &|p| {
                    p.mem_bytes_per_s / ctx.spec.cacheline_bytes as f64
                })?,
                fp => self.counter(ctx.t, &fp_rate(fp))?,
            };
            reading.counters.insert(event.clone(), value);
        }
        Ok(reading)
    }

    fn read_uncore(
        &mut self,
        ctx: &SampleContext<'_>,
        _socket: u32,
    ) -> Result<UncoreReading, SamplerError> {
        let line = ctx.spec.cacheline_bytes as f64;
        let read = |p: &Phase| p.mem_bytes_per_s * p.mem_read_fraction.unwrap_or(0.5) / line;
        let write =
            |p: &Phase| p.mem_bytes_per_s * (1.0 - p.mem_read_fraction.unwrap_or(0.5)) / line;
        // 64-byte payload per flit group on the inter-socket link.
        let link = |p: &Phase| p.link_bytes_per_s / 8.0;
        Ok(UncoreReading {
            cas_count_rd: self.counter(ctx.t, &read)?,
            cas_count_wr: self.counter(ctx.t, &write)?,
            link_tx_flits: self.counter(ctx.t, &link)?,
            link_rx_flits: self.counter(ctx.t, &link)?,
            pkg_energy_uj: Some(self.counter(ctx.t, &|p| pkg_watts(p, ctx.spec) * 1e6)?),
            dram_energy_uj: Some(self.counter(ctx.t, &|p| dram_watts(p) * 1e6)?),
        })
    }

    fn read_gpus(&mut self, ctx: &SampleContext<'_>) -> Result<Vec<GpuReading>, SamplerError> {
        let (profile, phase, _) = self.gauge_phase(ctx.t)?;
        let count = self
            .gpu_count
            .unwrap_or_else(|| phase.gpu_util_pct.len().max(phase.gpu_mem_used_mib.len()));
        Ok((0..count)
            .map(|i| {
                let util = phase.gpu_util_pct.get(i).copied().unwrap_or(0).min(100);
                GpuReading {
                    util_pct: util,
                    mem_used_mib: phase.gpu_mem_used_mib.get(i).copied().unwrap_or(0),
                    mem_total_mib: profile.gpu_mem_total_mib,
                    power_mw: Some(GPU_IDLE_MW + util * GPU_MW_PER_PCT),
                }
            })
            .collect())
    }

    fn read_io(&mut self, ctx: &SampleContext<'_>) -> Result<IoReading, SamplerError> {
        let req = self.profile_at(ctx.t)?.io_request_bytes;
        Ok(IoReading {
            bytes_read: self.counter(ctx.t, &|p| p.io_read_bytes_per_s)?,
            bytes_written: self.counter(ctx.t, &|p| p.io_write_bytes_per_s)?,
            opens: self.counter(ctx.t, &|p| p.io_opens_per_s)?,
            closes: self.counter(ctx.t, &|p| p.io_opens_per_s)?,
            read_calls: self.counter(ctx.t, &|p| p.io_read_bytes_per_s / req)?,
            write_calls: self.counter(ctx.t, &|p| p.io_write_bytes_per_s / req)?,
        })
    }

    fn read_network(&mut self, ctx: &SampleContext<'_>) -> Result<NetworkReading, SamplerError> {
        let pkt = self.profile_at(ctx.t)?.packet_bytes;
        Ok(NetworkReading {
            port_xmit_bytes: self.counter(ctx.t, &|p| p.net_xmit_bytes_per_s)?,
            port_rcv_bytes: self.counter(ctx.t, &|p| p.net_rcv_bytes_per_s)?,
            xmit_pkts: self.counter(ctx.t, &|p| p.net_xmit_bytes_per_s / pkt)?,
            rcv_pkts: self.counter(ctx.t, &|p| p.net_rcv_bytes_per_s / pkt)?,
        })
    }

    fn read_software(&mut self, ctx: &SampleContext<'_>) -> Result<SoftwareReading, SamplerError> {
        let (profile, phase, _) = self.gauge_phase(ctx.t)?;
        Ok(SoftwareReading {
            task_count: phase.task_count,
            thread_count: phase.thread_count.unwrap_or(phase.task_count),
            distinct_busy_cores: phase.busy_cores,
            rss_kib: phase.rss_kib,
            numa_imbalance_pct: phase.numa_imbalance_pct,
            command: profile.command.clone(),
        })
    }
}
