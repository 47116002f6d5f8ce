//! Backends that shell out to the node's own tools and parse their text
//! output.
//!
//! | source | command |
//! |---|---|
//! | cpu_core, cpu_uncore | `perf stat --log-fd 1 -x , -a --per-socket -e <events> -- sleep <window>` |
//! | gpu | `nvidia-smi --query-gpu=index,utilization.gpu,memory.used,memory.total,power.draw --format=csv,noheader,nounits` |
//! | io | `/usr/lpp/mmfs/bin/mmpmon -p -s` with `io_s` on stdin |
//! | network | `perfquery -x` |
//! | software | `ps -e -L -o user=,pid=,lwp=,psr=,rss=,stat=,comm=` and `numastat -m` |
//!
//! perf reports counts over a short window; the adapter scales each window to
//! the full interval and keeps running totals so it hands out cumulative
//! values like every other backend.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::process::{Command, Stdio};

use crate::model::Source;

use super::{
    Backend, CoreReading, GpuReading, IoReading, NetworkReading, SampleContext, SamplerError,
    SoftwareReading, UncoreReading,
};

/// Runs an external command and returns its stdout.
pub trait CommandRunner: Send {
    fn run(&self, program: &str, args: &[String], stdin: Option<&str>) -> std::io::Result<String>;
}

#[derive(Debug, Default, Clone)]
pub struct SystemRunner;

impl CommandRunner for SystemRunner {
    fn run(&self, program: &str, args: &[String], stdin: Option<&str>) -> std::io::Result<String> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(if stdin.is_some() {
                Stdio::piped()
            } else {
                Stdio::null()
            })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        if let (Some(input), Some(mut pipe)) = (stdin, child.stdin.take()) {
            pipe.write_all(input.as_bytes())?;
        }
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(std::io::Error::other(format!(
                "{program} exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

fn run_tool(
    runner: &dyn CommandRunner,
    source: Source,
    program: &str,
    args: &[String],
    stdin: Option<&str>,
) -> Result<String, SamplerError> {
    runner.run(program, args, stdin).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound
            || e.kind() == std::io::ErrorKind::PermissionDenied
        {
            SamplerError::unavailable(source, format!("{program}: {e}"))
        } else {
            SamplerError::Parse {
                tool: program.to_string(),
                reason: e.to_string(),
                raw: String::new(),
            }
        }
    })
}

fn args(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Event names of the Skylake-SP family, keyed by our counter names.
pub fn skylake_event_map() -> BTreeMap<String, String> {
    [
        ("cycles", "cycles"),
        ("instructions", "instructions"),
        ("ref_cycles", "ref-cycles"),
        ("branch_instructions", "branch-instructions"),
        ("branch_misses", "branch-misses"),
        ("llc_misses", "LLC-load-misses"),
        ("fp_scalar_single", "fp_arith_inst_retired.scalar_single"),
        ("fp_scalar_double", "fp_arith_inst_retired.scalar_double"),
        (
            "fp_128_packed_single",
            "fp_arith_inst_retired.128b_packed_single",
        ),
        (
            "fp_128_packed_double",
            "fp_arith_inst_retired.128b_packed_double",
        ),
        (
            "fp_256_packed_single",
            "fp_arith_inst_retired.256b_packed_single",
        ),
        (
            "fp_256_packed_double",
            "fp_arith_inst_retired.256b_packed_double",
        ),
        (
            "fp_512_packed_single",
            "fp_arith_inst_retired.512b_packed_single",
        ),
        (
            "fp_512_packed_double",
            "fp_arith_inst_retired.512b_packed_double",
        ),
        // raw encodings keep perf from scaling CAS counts to MiB
        ("cas_count_rd", "uncore_imc/event=0x04,umask=0x03/"),
        ("cas_count_wr", "uncore_imc/event=0x04,umask=0x0c/"),
        ("link_tx_flits", "uncore_upi/event=0x02,umask=0x0f/"),
        ("link_rx_flits", "uncore_upi/event=0x03,umask=0x0f/"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

const UNCORE_COUNTERS: [&str; 4] = [
    "cas_count_rd",
    "cas_count_wr",
    "link_tx_flits",
    "link_rx_flits",
];

/// One `perf stat --per-socket -x ,` row.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfRow {
    pub socket: u32,
    pub event: String,
    /// `None` for `<not supported>` / `<not counted>`.
    pub count: Option<u64>,
}

pub fn parse_perf_stat_csv(text: &str) -> Result<Vec<PerfRow>, SamplerError> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 {
            return Err(SamplerError::parse(
                "perf",
                format!("short row {line:?}"),
                text,
            ));
        }
        let socket = fields[0]
            .strip_prefix('S')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                SamplerError::parse("perf", format!("bad socket column {:?}", fields[0]), text)
            })?;
        let count = match fields[2] {
            v if v.starts_with('<') => None,
            v => Some(
                v.parse::<f64>()
                    .map_err(|_| SamplerError::parse("perf", format!("bad count {v:?}"), text))?
                    .round() as u64,
            ),
        };
        // raw PMU events like `uncore_imc/event=0x04,umask=0x03/` contain
        // the separator; glue the pieces back together
        let mut event = fields[4].to_string();
        let mut i = 5;
        while event.contains('/') && !event.ends_with('/') && i < fields.len() {
            event.push(',');
            event.push_str(fields[i]);
            i += 1;
        }
        rows.push(PerfRow {
            socket,
            event,
            count,
        });
    }
    Ok(rows)
}

/// Core and uncore counters through `perf stat`.
pub struct PerfAdapter {
    runner: Box<dyn CommandRunner>,
    pub events: BTreeMap<String, String>,
    pub window_s: u64,
    pub interval_s: u64,
    totals: HashMap<(u32, String), u128>,
    rejected: BTreeSet<(u32, String)>,
    measured_at: Option<i64>,
}

impl PerfAdapter {
    pub fn new(runner: Box<dyn CommandRunner>, interval_s: u64, window_s: u64) -> Self {
        PerfAdapter {
            runner,
            events: skylake_event_map(),
            window_s: window_s.clamp(1, interval_s.max(1)),
            interval_s,
            totals: HashMap::new(),
            rejected: BTreeSet::new(),
            measured_at: None,
        }
    }

    pub fn command_args(&self) -> Vec<String> {
        let list: Vec<&str> = self.events.values().map(String::as_str).collect();
        let mut a = args(&[
            "stat",
            "--log-fd",
            "1",
            "-x",
            ",",
            "-a",
            "--per-socket",
            "-e",
        ]);
        a.push(list.join(","));
        a.extend(args(&["--", "sleep"]));
        a.push(self.window_s.to_string());
        a
    }

    /// Measures once per cycle; later calls in the same cycle reuse the totals.
    fn measure(&mut self, t: i64) -> Result<(), SamplerError> {
        if self.measured_at == Some(t) {
            return Ok(());
        }
        let out = run_tool(
            self.runner.as_ref(),
            Source::CpuCore,
            "perf",
            &self.command_args(),
            None,
        )?;
        let rows = parse_perf_stat_csv(&out)?;
        let by_perf_name: HashMap<&str, &str> = self
            .events
            .iter()
            .map(|(ours, theirs)| (theirs.as_str(), ours.as_str()))
            .collect();
        let scale = self.interval_s as f64 / self.window_s as f64;
        self.rejected.clear();
        for row in rows {
            let Some(&ours) = by_perf_name.get(row.event.as_str()) else {
                continue;
            };
            match row.count {
                Some(c) => {
                    *self
                        .totals
                        .entry((row.socket, ours.to_string()))
                        .or_default() += (c as f64 * scale).round() as u128;
                }
                None => {
                    self.rejected.insert((row.socket, ours.to_string()));
                }
            }
        }
        self.measured_at = Some(t);
        Ok(())
    }

    fn total(&self, socket: u32, name: &str) -> Option<u64> {
        if self.rejected.contains(&(socket, name.to_string())) {
            return None;
        }
        self.totals
            .get(&(socket, name.to_string()))
            .map(|&v| v as u64)
    }
}

impl Backend for PerfAdapter {
    fn read_core(
        &mut self,
        ctx: &SampleContext<'_>,
        socket: u32,
        events: &[String],
    ) -> Result<CoreReading, SamplerError> {
        self.measure(ctx.t)?;
        let mut reading = CoreReading::default();
        for e in events {
            match self.total(socket, e) {
                Some(v) => {
                    reading.counters.insert(e.clone(), v);
                }
                None => reading.rejected.push(e.clone()),
            }
        }
        if reading.counters.is_empty() {
            return Err(SamplerError::unavailable(
                Source::CpuCore,
                "no core event was counted",
            ));
        }
        Ok(reading)
    }

    fn read_uncore(
        &mut self,
        ctx: &SampleContext<'_>,
        socket: u32,
    ) -> Result<UncoreReading, SamplerError> {
        self.measure(ctx.t)?;
        let get = |name: &str| self.total(socket, name);
        match (get(UNCORE_COUNTERS[0]), get(UNCORE_COUNTERS[1])) {
            (Some(rd), Some(wr)) => Ok(UncoreReading {
                cas_count_rd: rd,
                cas_count_wr: wr,
                link_tx_flits: get(UNCORE_COUNTERS[2]).unwrap_or(0),
                link_rx_flits: get(UNCORE_COUNTERS[3]).unwrap_or(0),
                pkg_energy_uj: None,
                dram_energy_uj: None,
            }),
            _ => Err(SamplerError::unavailable(
                Source::CpuUncore,
                "memory controller events not counted",
            )),
        }
    }
}

/// Power reads `[N/A]` or `[Not Supported]` on some boards.
fn optional(s: &str, text: &str) -> Result<Option<f64>, SamplerError> {
    if s.starts_with('[') {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(Some(v)),
        _ => Err(SamplerError::parse(
            "nvidia-smi",
            format!("not a number: {s:?}"),
            text,
        )),
    }
}

pub fn parse_nvidia_smi(text: &str) -> Result<Vec<GpuReading>, SamplerError> {
    let mut gpus = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 5 {
            return Err(SamplerError::parse(
                "nvidia-smi",
                format!("expected 5 columns in {line:?}"),
                text,
            ));
        }
        let num = |s: &str| {
            s.parse::<u64>().map_err(|_| {
                SamplerError::parse("nvidia-smi", format!("not a number: {s:?}"), text)
            })
        };
        gpus.push(GpuReading {
            util_pct: num(cols[1])?,
            mem_used_mib: num(cols[2])?,
            mem_total_mib: num(cols[3])?,
            power_mw: optional(cols[4], text)?.map(|w| (w * 1000.0).round() as u64),
        });
    }
    Ok(gpus)
}

pub struct NvidiaSmi {
    runner: Box<dyn CommandRunner>,
}

impl NvidiaSmi {
    pub fn new(runner: Box<dyn CommandRunner>) -> Self {
        NvidiaSmi { runner }
    }

    pub fn command_args() -> Vec<String> {
        args(&[
            "--query-gpu=index,utilization.gpu,memory.used,memory.total,power.draw",
            "--format=csv,noheader,nounits",
        ])
    }
}

impl Backend for NvidiaSmi {
    fn read_gpus(&mut self, _ctx: &SampleContext<'_>) -> Result<Vec<GpuReading>, SamplerError> {
        let out = run_tool(
            self.runner.as_ref(),
            Source::Gpu,
            "nvidia-smi",
            &Self::command_args(),
            None,
        )?;
        parse_nvidia_smi(&out)
    }
}

/// Parses the `io_s` response of `mmpmon -p`.
pub fn parse_mmpmon_io_s(text: &str) -> Result<IoReading, SamplerError> {
    let line = text
        .lines()
        .find(|l| l.starts_with("_io_s_"))
        .ok_or_else(|| SamplerError::parse("mmpmon", "no _io_s_ record", text))?;
    let toks: Vec<&str> = line.split_whitespace().collect();
    let field = |name: &str| -> Result<u64, SamplerError> {
        let pos = toks
            .iter()
            .position(|t| *t == name)
            .ok_or_else(|| SamplerError::parse("mmpmon", format!("missing {name}"), text))?;
        toks.get(pos + 1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| SamplerError::parse("mmpmon", format!("bad value for {name}"), text))
    };
    if field("_rc_")? != 0 {
        return Err(SamplerError::parse("mmpmon", "non-zero return code", text));
    }
    Ok(IoReading {
        bytes_read: field("_br_")?,
        bytes_written: field("_bw_")?,
        opens: field("_oc_")?,
        closes: field("_cc_")?,
        read_calls: field("_rdc_")?,
        write_calls: field("_wc_")?,
    })
}

pub struct Mmpmon {
    runner: Box<dyn CommandRunner>,
    pub program: String,
}

impl Mmpmon {
    pub fn new(runner: Box<dyn CommandRunner>) -> Self {
        Mmpmon {
            runner,
            program: "/usr/lpp/mmfs/bin/mmpmon".into(),
        }
    }
}

impl Backend for Mmpmon {
    fn read_io(&mut self, _ctx: &SampleContext<'_>) -> Result<IoReading, SamplerError> {
        let out = run_tool(
            self.runner.as_ref(),
            Source::Io,
            &self.program,
            &args(&["-p", "-s"]),
            Some("io_s\n"),
        )?;
        parse_mmpmon_io_s(&out)
    }
}

/// Parses `perfquery -x`. Data counters count 4-byte words.
pub fn parse_perfquery(text: &str) -> Result<NetworkReading, SamplerError> {
    let mut fields = HashMap::new();
    for line in text.lines() {
        if let Some((key, rest)) = line.split_once(':') {
            let value = rest.trim_start_matches('.').trim();
            if let Ok(v) = value.parse::<u64>() {
                fields.insert(key.trim().to_string(), v);
            }
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| SamplerError::parse("perfquery", format!("missing {k}"), text))
    };
    Ok(NetworkReading {
        port_xmit_bytes: get("PortXmitData")?.wrapping_mul(4),
        port_rcv_bytes: get("PortRcvData")?.wrapping_mul(4),
        xmit_pkts: get("PortXmitPkts")?,
        rcv_pkts: get("PortRcvPkts")?,
    })
}

pub struct Perfquery {
    runner: Box<dyn CommandRunner>,
}

impl Perfquery {
    pub fn new(runner: Box<dyn CommandRunner>) -> Self {
        Perfquery { runner }
    }
}

impl Backend for Perfquery {
    fn read_network(&mut self, _ctx: &SampleContext<'_>) -> Result<NetworkReading, SamplerError> {
        let out = run_tool(
            self.runner.as_ref(),
            Source::Network,
            "perfquery",
            &args(&["-x"]),
            None,
        )?;
        parse_perfquery(&out)
    }
}

/// Parses `ps -e -L -o user=,pid=,lwp=,psr=,rss=,stat=,comm=` restricted to
/// `user` (or to every non-system account when `user` is `None`).
pub fn parse_ps_threads(text: &str, user: Option<&str>) -> Result<SoftwareReading, SamplerError> {
    let mut pids: BTreeMap<u64, (u64, String)> = BTreeMap::new();
    let mut threads = 0u64;
    let mut busy = BTreeSet::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 7 {
            return Err(SamplerError::parse(
                "ps",
                format!("short row {line:?}"),
                text,
            ));
        }
        let owner = cols[0];
        let keep = match user {
            Some(u) => owner == u,
            None => !matches!(
                owner,
                "root" | "daemon" | "nobody" | "systemd+" | "messagebus" | "munge" | "slurm"
            ),
        };
        if !keep {
            continue;
        }
        let num = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| SamplerError::parse("ps", format!("not a number: {s:?}"), text))
        };
        let pid = num(cols[1])?;
        let psr = num(cols[3])?;
        let rss = num(cols[4])?;
        threads += 1;
        if cols[5].starts_with('R') {
            busy.insert(psr);
        }
        pids.entry(pid).or_insert((rss, cols[6..].join(" ")));
    }
    let command = pids
        .values()
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, c)| c.replace(|c: char| c.is_whitespace(), "_"));
    Ok(SoftwareReading {
        task_count: pids.len() as u64,
        thread_count: threads,
        distinct_busy_cores: busy.len() as u64,
        rss_kib: pids.values().map(|(rss, _)| rss).sum(),
        numa_imbalance_pct: 0.0,
        command,
    })
}

/// Spread of used memory across NUMA nodes from `numastat -m`, as
/// `(max - min) / max` in percent.
pub fn parse_numastat_imbalance(text: &str) -> Result<f64, SamplerError> {
    let row = text
        .lines()
        .find(|l| l.trim_start().starts_with("MemUsed"))
        .ok_or_else(|| SamplerError::parse("numastat", "no MemUsed row", text))?;
    let mut values: Vec<f64> = row
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| SamplerError::parse("numastat", "bad MemUsed value", text))?;
    // last column is the total
    if values.len() > 1 {
        values.pop();
    }
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    if values.is_empty() || max <= 0.0 {
        return Ok(0.0);
    }
    Ok(((max - min) / max * 1000.0).round() / 10.0)
}

pub struct ProcessTable {
    runner: Box<dyn CommandRunner>,
}

impl ProcessTable {
    pub fn new(runner: Box<dyn CommandRunner>) -> Self {
        ProcessTable { runner }
    }
}

impl Backend for ProcessTable {
    fn read_software(&mut self, ctx: &SampleContext<'_>) -> Result<SoftwareReading, SamplerError> {
        let out = run_tool(
            self.runner.as_ref(),
            Source::Software,
            "ps",
            &args(&["-e", "-L", "-o", "user=,pid=,lwp=,psr=,rss=,stat=,comm="]),
            None,
        )?;
        let user = ctx
            .job
            .and_then(|j| j.details.as_ref())
            .map(|d| d.user_id.as_str());
        let mut reading = parse_ps_threads(&out, user)?;
        // numastat is optional; missing it only loses the imbalance figure
        if let Ok(text) = self.runner.run("numastat", &args(&["-m"]), None) {
            reading.numa_imbalance_pct = parse_numastat_imbalance(&text).unwrap_or(0.0);
        }
        Ok(reading)
    }
}

/// Routes each source to its tool adapter.
pub struct HostBackend {
    pub perf: Option<PerfAdapter>,
    pub gpu: Option<NvidiaSmi>,
    pub io: Option<Mmpmon>,
    pub network: Option<Perfquery>,
    pub software: Option<ProcessTable>,
}

impl HostBackend {
    pub fn system(interval_s: u64, perf_window_s: u64) -> Self {
        HostBackend {
            perf: Some(PerfAdapter::new(
                Box::new(SystemRunner),
                interval_s,
                perf_window_s,
            )),
            gpu: Some(NvidiaSmi::new(Box::new(SystemRunner))),
            io: Some(Mmpmon::new(Box::new(SystemRunner))),
            network: Some(Perfquery::new(Box::new(SystemRunner))),
            software: Some(ProcessTable::new(Box::new(SystemRunner))),
        }
    }
}

fn missing(source: Source) -> SamplerError {
    SamplerError::unavailable(source, "adapter not configured")
}

impl Backend for HostBackend {
    fn read_core(
        &mut self,
        ctx: &SampleContext<'_>,
        socket: u32,
        events: &[String],
    ) -> Result<CoreReading, SamplerError> {
        self.perf
            .as_mut()
            .ok_or_else(|| missing(Source::CpuCore))?
            .read_core(ctx, socket, events)
    }

    fn read_uncore(
        &mut self,
        ctx: &SampleContext<'_>,
        socket: u32,
    ) -> Result<UncoreReading, SamplerError> {
        self.perf
            .as_mut()
            .ok_or_else(|| missing(Source::CpuUncore))?
            .read_uncore(ctx, socket)
    }

    fn read_gpus(&mut self, ctx: &SampleContext<'_>) -> Result<Vec<GpuReading>, SamplerError> {
        self.gpu
            .as_mut()
            .ok_or_else(|| missing(Source::Gpu))?
            .read_gpus(ctx)
    }

    fn read_io(&mut self, ctx: &SampleContext<'_>) -> Result<IoReading, SamplerError> {
        self.io
            .as_mut()
            .ok_or_else(|| missing(Source::Io))?
            .read_io(ctx)
    }

    fn read_network(&mut self, ctx: &SampleContext<'_>) -> Result<NetworkReading, SamplerError> {
        self.network
            .as_mut()
            .ok_or_else(|| missing(Source::Network))?
            .read_network(ctx)
    }

    fn read_software(&mut self, ctx: &SampleContext<'_>) -> Result<SoftwareReading, SamplerError> {
        self.software
            .as_mut()
            .ok_or_else(|| missing(Source::Software))?
            .read_software(ctx)
    }
}
